"""Fit the three clothing models on a synthetic population and print held-out likelihoods."""
import numpy as np

from bodyshape import clothmodel as cm


def main():
    users = cm.synthetic_population(180, seed=1)
    train, test = cm.holdout_split(users, 0.25, seed=1)
    # the synthetic users carry no body-type labels, so model 2 groups by the sign of beta_2
    labeled_train = cm.label_by_threshold(train, 0.0)
    labeled_test = cm.label_by_threshold(test, 0.0)
    models = {
        "marginal": (cm.fit_marginal(train), test),
        "group": (cm.fit_group_conditional(labeled_train), labeled_test),
        "shape": (cm.fit_shape_conditional(train), test),
    }
    for name, (model, held) in models.items():
        print(f"{name:8s} NLL {cm.nll(model, held):.3f}")
    shape_model = models["shape"][0]
    grid = np.linspace(-3, 3, 7)
    for name in shape_model.vocab.names[:4]:
        curve = [shape_model.posterior(name, b) for b in grid]
        print(f"{name:14s}", " ".join(f"{p:.2f}" for p in curve))


if __name__ == "__main__":
    main()
