"""Clothing-category models conditioned on body shape.

Three predictors of whether a post contains a category:

1. ``MarginalModel``: p(c), the smoothed fraction of posts containing c.
2. ``GroupModel``: p(c | G) for the annotated body-type groups.
3. ``ShapeConditionalModel``: p(c | beta2) by Bayes' rule from kernel
   density estimates of beta2 among wearers and non-wearers of c.

All three are scored by the same per-post Bernoulli likelihood so their
negative log-likelihoods are comparable.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySamples, MissingGroup, MissingShape, NoData

GROUPS = ("average", "plus", "unlabeled")
GROUP_CODES = {"a": "average", "p": "plus", "": "unlabeled"}
CLAMP = 1e-6
FALLBACK_BANDWIDTH = 1.0

# The first seven names are the categories discussed for the fashion data;
# the remaining seven are stand-ins so the default vocabulary has 14 entries.
DEFAULT_CATEGORIES = (
    "Dress", "Skirt", "Short", "Cardigan", "Jacket", "Leggings", "Tee-and-Tank",
    "Jeans", "Blouse", "Sweater", "Coat", "Pants", "Top", "Boots",
)


class CategoryVocabulary:
    """Ordered, duplicate-free list of category names."""

    def __init__(self, names=DEFAULT_CATEGORIES):
        names = tuple(str(n) for n in names)
        if not names:
            raise ValueError("vocabulary needs at least one category")
        if len(set(names)) != len(names):
            raise ValueError("vocabulary names must be unique")
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name):
        return name in self._index

    def index(self, name) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ValueError(f"unknown category {name!r}") from None

    def indicators(self, post) -> np.ndarray:
        """0/1 vector over the vocabulary for one post's category set."""
        y = np.zeros(len(self), dtype=float)
        for c in post:
            y[self.index(c)] = 1.0
        return y

    def __eq__(self, other):
        return isinstance(other, CategoryVocabulary) and self.names == other.names

    def __repr__(self):
        return f"CategoryVocabulary({list(self.names)!r})"


@dataclass
class UserRecord:
    user_id: str
    group: str = "unlabeled"
    beta2: float | None = None
    posts: list = field(default_factory=list)  # list of frozensets of category names

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"group must be one of {GROUPS}, got {self.group!r}")
        if self.beta2 is not None:
            self.beta2 = float(self.beta2)
            if not math.isfinite(self.beta2):
                raise ValueError(f"user {self.user_id}: beta2 must be finite")
        self.posts = [frozenset(p) for p in self.posts]


def _check_vocab(users, vocab: CategoryVocabulary):
    for u in users:
        for post in u.posts:
            for c in post:
                if c not in vocab:
                    raise ValueError(f"user {u.user_id}: category {c!r} not in vocabulary")


# ---------------------------------------------------------------------------
# kernel density


def silverman_bandwidth(samples) -> float:
    """1.06 * std * N^(-1/5); falls back to a unit bandwidth when the spread is zero."""
    x = np.asarray(samples, dtype=float)
    sd = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
    if sd <= 0:
        return FALLBACK_BANDWIDTH
    return 1.06 * sd * len(x) ** -0.2


class Kde1D:
    """Gaussian kernel density estimate (1 / (N h)) sum phi((x - x_i) / h)."""

    def __init__(self, samples, bandwidth: float | None = None):
        x = np.asarray(samples, dtype=float).ravel()
        if x.size == 0:
            raise EmptySamples("a density estimate needs at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
        if not h > 0:
            raise ValueError("bandwidth must be positive")
        self.samples = x
        self.bandwidth = h

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        z = (x[..., None] - self.samples) / self.bandwidth
        dens = np.exp(-0.5 * z * z).sum(axis=-1) / (len(self.samples) * self.bandwidth * math.sqrt(2 * math.pi))
        return dens if dens.ndim else float(dens)

    @property
    def support(self):
        """Interval holding all but a negligible part of the mass (6 bandwidths past the samples)."""
        return float(self.samples.min() - 6 * self.bandwidth), float(self.samples.max() + 6 * self.bandwidth)

    def to_dict(self) -> dict:
        return {"bandwidth": self.bandwidth, "samples": [float(v) for v in self.samples]}


def kde_eval(kde: Kde1D, x):
    return kde(x)


# ---------------------------------------------------------------------------
# models


def _smoothed_frequencies(users, vocab):
    counts = np.zeros(len(vocab))
    n = 0
    for u in users:
        for post in u.posts:
            counts += vocab.indicators(post)
            n += 1
    return (counts + 1.0) / (n + 2.0), n


@dataclass(frozen=True)
class MarginalModel:
    vocab: CategoryVocabulary
    probs: np.ndarray
    n_posts: int

    def probabilities(self, user) -> np.ndarray:
        return self.probs

    def to_dict(self) -> dict:
        return {"model": 1, "n_posts": self.n_posts, "p": dict(zip(self.vocab.names, map(float, self.probs)))}


@dataclass(frozen=True)
class GroupModel:
    vocab: CategoryVocabulary
    tables: dict  # group name -> probability vector

    def probabilities(self, user) -> np.ndarray:
        if user.group not in self.tables:
            raise MissingGroup(f"user {user.user_id} has no body-type label")
        return self.tables[user.group]

    def to_dict(self) -> dict:
        return {"model": 2, "p": {g: dict(zip(self.vocab.names, map(float, t))) for g, t in self.tables.items()}}


@dataclass(frozen=True)
class ShapeConditionalModel:
    vocab: CategoryVocabulary
    prior: np.ndarray
    wear: list  # Kde1D or None per category
    not_wear: list
    marginal: Kde1D
    fallback: list  # True where the category uses p(c) because of too few wearers or non-wearers

    def likelihoods(self, j: int, beta2):
        """(p(beta2 | c), p(beta2 | not c)) for category index j."""
        if self.fallback[j]:
            m = self.marginal(beta2)
            return m, m
        return self.wear[j](beta2), self.not_wear[j](beta2)

    def posterior(self, category, beta2, clamp: bool = True):
        """p(c | beta2), clipped to [CLAMP, 1 - CLAMP] unless ``clamp`` is false."""
        j = category if isinstance(category, (int, np.integer)) else self.vocab.index(category)
        pc = self.prior[j]
        lw, ln = self.likelihoods(j, beta2)
        num = lw * pc
        den = num + ln * (1.0 - pc)
        with np.errstate(invalid="ignore", divide="ignore"):
            post = np.where(den > 0, num / np.where(den > 0, den, 1.0), pc)
        if clamp:
            post = np.clip(post, CLAMP, 1.0 - CLAMP)
        return post if np.ndim(post) else float(post)

    def evidence(self, j: int, beta2):
        """Two-hypothesis mixture p(beta2|c) p(c) + p(beta2|not c) (1 - p(c))."""
        lw, ln = self.likelihoods(j, beta2)
        return lw * self.prior[j] + ln * (1.0 - self.prior[j])

    def probabilities(self, user) -> np.ndarray:
        if user.beta2 is None:
            raise MissingShape(f"user {user.user_id} has no beta2")
        return np.array([self.posterior(j, user.beta2) for j in range(len(self.vocab))])

    def to_dict(self) -> dict:
        return {
            "model": 3,
            "p": dict(zip(self.vocab.names, map(float, self.prior))),
            "fallback": [n for n, f in zip(self.vocab.names, self.fallback) if f],
            "bandwidths": {
                n: None if f else {"wear": w.bandwidth, "not_wear": nw.bandwidth}
                for n, f, w, nw in zip(self.vocab.names, self.fallback, self.wear, self.not_wear)
            },
            "marginal_bandwidth": self.marginal.bandwidth,
        }


def fit_marginal(users, vocab: CategoryVocabulary = CategoryVocabulary()) -> MarginalModel:
    users = list(users)
    _check_vocab(users, vocab)
    probs, n = _smoothed_frequencies(users, vocab)
    if n == 0:
        raise NoData("no posts to estimate category frequencies from")
    return MarginalModel(vocab, probs, n)


def fit_group_conditional(users, vocab: CategoryVocabulary = CategoryVocabulary()) -> GroupModel:
    users = list(users)
    _check_vocab(users, vocab)
    tables = {}
    for g in ("average", "plus"):
        members = [u for u in users if u.group == g]
        if not members:
            raise MissingGroup(f"no users in group {g!r}")
        tables[g] = _smoothed_frequencies(members, vocab)[0]
    return GroupModel(vocab, tables)


def fit_shape_conditional(users, vocab: CategoryVocabulary = CategoryVocabulary(),
                          bandwidth: float | None = None) -> ShapeConditionalModel:
    """Per-category wearer / non-wearer densities of beta2, one sample per post.

    A category falls back to its prior when fewer than two distinct users
    wear it or fewer than two distinct users ever post without it.

    By default every density shares one bandwidth, Silverman's rule over the
    users' beta2. Wearer and non-wearer densities of unequal width have a
    likelihood ratio that runs off to 0 or infinity in the tails.
    """
    users = list(users)
    missing = [u.user_id for u in users if u.beta2 is None]
    if missing:
        raise MissingShape(f"users without beta2: {missing[:5]}")
    prior = fit_marginal(users, vocab).probs
    if bandwidth is None:
        bandwidth = silverman_bandwidth([u.beta2 for u in users])
    wear_s = [[] for _ in vocab]
    not_s = [[] for _ in vocab]
    wear_u = [set() for _ in vocab]
    not_u = [set() for _ in vocab]
    for u in users:
        for post in u.posts:
            y = vocab.indicators(post)
            for j in range(len(vocab)):
                if y[j]:
                    wear_s[j].append(u.beta2)
                    wear_u[j].add(u.user_id)
                else:
                    not_s[j].append(u.beta2)
                    not_u[j].add(u.user_id)
    wear, not_wear, fallback = [], [], []
    for j in range(len(vocab)):
        if len(wear_u[j]) < 2 or len(not_u[j]) < 2:
            wear.append(None)
            not_wear.append(None)
            fallback.append(True)
        else:
            wear.append(Kde1D(wear_s[j], bandwidth))
            not_wear.append(Kde1D(not_s[j], bandwidth))
            fallback.append(False)
    marginal = Kde1D([u.beta2 for u in users], bandwidth)
    return ShapeConditionalModel(vocab, prior, wear, not_wear, marginal, fallback)


def posterior(model: ShapeConditionalModel, category, beta2, clamp: bool = True):
    return model.posterior(category, beta2, clamp)


def nll(model, users) -> float:
    """-(1/N) sum over users, posts and categories of the Bernoulli log-likelihood."""
    users = list(users)
    if not users:
        raise NoData("no held-out users")
    terms = []
    for u in users:
        p = np.clip(model.probabilities(u), CLAMP, 1.0 - CLAMP)
        for post in u.posts:
            y = model.vocab.indicators(post)
            terms.extend(np.where(y > 0, np.log(p), np.log1p(-p)).tolist())
    # fsum is exactly rounded, so the result does not depend on user or category order
    return -math.fsum(terms) / len(users)


# ---------------------------------------------------------------------------
# body-type threshold


def classify_bodytype(beta2: float, threshold: float = 0.0) -> str:
    return "plus" if beta2 < threshold else "average"


def bodytype_accuracy(users, threshold: float) -> float:
    labeled = [u for u in users if u.group != "unlabeled" and u.beta2 is not None]
    if not labeled:
        raise MissingGroup("no labeled users with beta2")
    return sum(classify_bodytype(u.beta2, threshold) == u.group for u in labeled) / len(labeled)


def select_threshold(users) -> float:
    """Midpoint of sorted beta2 values with the best accuracy; ties go to the one closest to 0."""
    labeled = [u for u in users if u.group != "unlabeled" and u.beta2 is not None]
    groups = {u.group for u in labeled}
    if groups != {"average", "plus"}:
        raise MissingGroup("both body-type labels are required")
    values = np.unique([u.beta2 for u in labeled])
    candidates = (values[:-1] + values[1:]) / 2 if len(values) > 1 else values
    b = np.array([u.beta2 for u in labeled])
    plus = np.array([u.group == "plus" for u in labeled])
    acc = [np.mean((b < t) == plus) for t in candidates]
    best = max(acc)
    return float(min((t for t, a in zip(candidates, acc) if a == best), key=lambda t: (abs(t), t)))


# ---------------------------------------------------------------------------
# data


def holdout_split(users, fraction: float, seed: int):
    """Seeded user-level split into (train, held-out)."""
    users = list(users)
    if not 0 < fraction < 1:
        raise ValueError("holdout fraction must lie strictly between 0 and 1")
    n_test = int(round(fraction * len(users)))
    if n_test == 0 or n_test == len(users):
        raise ValueError(f"holdout fraction {fraction} leaves an empty train or test set")
    order = np.random.default_rng(seed).permutation(len(users))
    test = set(order[:n_test].tolist())
    return [u for i, u in enumerate(users) if i not in test], [u for i, u in enumerate(users) if i in test]


def label_by_threshold(users, threshold: float = 0.0):
    """Copies of the users with groups assigned by thresholding beta2."""
    return [UserRecord(u.user_id, classify_bodytype(u.beta2, threshold), u.beta2, u.posts) for u in users]


def synthetic_population(n_users: int = 180, seed: int = 0, vocab: CategoryVocabulary = CategoryVocabulary(),
                         n_correlated: int = 4, slope: float = 1.5, posts_per_user=(3, 12)):
    """Users whose first ``n_correlated`` categories are worn with probability
    sigmoid(b_c - slope * beta2); the rest are independent of shape.

    Groups are left unlabeled; beta2 ~ N(0, 1.5^2).
    """
    rng = np.random.default_rng(seed)
    Z = len(vocab)
    base = rng.uniform(-1.5, 0.0, Z)
    users = []
    for i in range(n_users):
        b2 = float(rng.normal(0.0, 1.5))
        logits = base.copy()
        logits[:n_correlated] -= slope * b2
        p = 1.0 / (1.0 + np.exp(-logits))
        posts = []
        for _ in range(int(rng.integers(posts_per_user[0], posts_per_user[1] + 1))):
            worn = rng.random(Z) < p
            posts.append(frozenset(vocab.names[j] for j in np.flatnonzero(worn)))
        users.append(UserRecord(f"u{i:04d}", "unlabeled", b2, posts))
    return users


CSV_HEADER = ["user_id", "group", "beta2", "post_id", "categories"]


class CsvSchemaError(ValueError):
    pass


def read_users_csv(path, vocab: CategoryVocabulary = CategoryVocabulary()) -> list:
    """One row per post: user_id, group (a, p or empty), beta2 (may be empty), post_id, ';'-joined categories."""
    users = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise CsvSchemaError(f"{path}: row 1: expected header {','.join(CSV_HEADER)}")
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise CsvSchemaError(f"{path}: row {row_no}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            uid, group, beta2, _post_id, cats = (f.strip() for f in row)
            if not uid:
                raise CsvSchemaError(f"{path}: row {row_no}: empty user_id")
            if group not in GROUP_CODES:
                raise CsvSchemaError(f"{path}: row {row_no}: group must be 'a', 'p' or empty, got {group!r}")
            try:
                b2 = float(beta2) if beta2 else None
            except ValueError:
                raise CsvSchemaError(f"{path}: row {row_no}: beta2 {beta2!r} is not a number") from None
            if b2 is not None and not math.isfinite(b2):
                raise CsvSchemaError(f"{path}: row {row_no}: beta2 must be finite")
            post = frozenset(c.strip() for c in cats.split(";") if c.strip())
            unknown = [c for c in post if c not in vocab]
            if unknown:
                raise CsvSchemaError(f"{path}: row {row_no}: categories not in vocabulary: {sorted(unknown)}")
            g = GROUP_CODES[group]
            u = users.get(uid)
            if u is None:
                users[uid] = UserRecord(uid, g, b2, [post])
                continue
            if u.group != g or (u.beta2 != b2):
                raise CsvSchemaError(f"{path}: row {row_no}: user {uid} has inconsistent group or beta2")
            u.posts.append(post)
    return list(users.values())


def write_users_csv(path, users, vocab: CategoryVocabulary = CategoryVocabulary()) -> None:
    codes = {v: k for k, v in GROUP_CODES.items()}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for u in users:
            b2 = "" if u.beta2 is None else repr(float(u.beta2))
            for k, post in enumerate(u.posts):
                cats = ";".join(c for c in vocab.names if c in post)
                w.writerow([u.user_id, codes[u.group], b2, f"{u.user_id}-{k}", cats])


CURVE_GRID = np.round(np.arange(-4.0, 4.0 + 1e-9, 0.05), 10)


def posterior_curves(model: ShapeConditionalModel, grid=CURVE_GRID) -> np.ndarray:
    """(len(grid), Z) array of p(c | beta2)."""
    return np.stack([np.atleast_1d(model.posterior(j, grid)) for j in range(len(model.vocab))], axis=1)


def write_curves_csv(path, model: ShapeConditionalModel, grid=CURVE_GRID) -> None:
    curves = posterior_curves(model, grid)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beta2", *model.vocab.names])
        for x, row in zip(grid, curves):
            w.writerow([f"{x:.2f}", *(f"{v:.10g}" for v in row)])
