"""Embedding scoring backends.

Cosine scoring, a learnable upper-triangular cosine transform trained with
a triplet ranking loss over hard-mined negatives, development-set centering,
LDA, and a two-covariance PLDA with closed-form likelihood-ratio scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, eigh, solve_triangular
from scipy.special import expit

from .metrics import ScoreSet, Trial, compute_eer


# ---------------------------------------------------------------------------
# cosine and learned-cosine scoring


def cosine_score(x1, x2) -> float:
    """Inner product of the length-normalized vectors."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n1, n2 = np.linalg.norm(x1), np.linalg.norm(x2)
    if n1 < 1e-12 or n2 < 1e-12:
        raise ValueError("degenerate embedding: zero norm")
    return float(np.dot(x1, x2) / (n1 * n2))


@dataclass
class CsmlTransform:
    """Upper-triangular square transform with a strictly positive diagonal,
    which keeps A^T A positive-definite."""

    matrix: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("transform must be square")
        if np.any(np.tril(a, -1) != 0.0):
            raise ValueError("transform must be upper triangular")
        if np.any(np.diag(a) <= 0.0):
            raise ValueError("transform diagonal must be positive")
        self.matrix = a

    @classmethod
    def identity(cls, dim: int) -> "CsmlTransform":
        return cls(np.eye(dim))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def _transform_matrix(a) -> np.ndarray:
    return a.matrix if isinstance(a, CsmlTransform) else np.asarray(a, dtype=np.float64)


def csml_score(x1, x2, a) -> float:
    """Cosine similarity of the transformed pair (A x1, A x2)."""
    am = _transform_matrix(a)
    return cosine_score(am @ np.asarray(x1, dtype=np.float64),
                        am @ np.asarray(x2, dtype=np.float64))


def _transformed_unit_rows(a, embeddings):
    e = np.asarray(embeddings, dtype=np.float64)
    u = e @ _transform_matrix(a).T
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("degenerate embedding: zero norm after transform")
    return e, u, norms, u / norms[:, None]


def triplet_loss(a, embeddings, triplets) -> float:
    """Sum over triplets of log(1 + exp(-(s_ap - s_an))) under csml scores."""
    loss, _ = triplet_loss_and_grad(a, embeddings, triplets, need_grad=False)
    return loss


def triplet_loss_and_grad(a, embeddings, triplets, need_grad: bool = True):
    """Triplet ranking loss and its gradient w.r.t. the transform.

    The gradient is masked to the upper triangle, matching the transform's
    free parameters.
    """
    trip = np.asarray(triplets, dtype=np.intp)
    if trip.size == 0:
        raise ValueError("no triplets")
    e, u, norms, u_hat = _transformed_unit_rows(a, embeddings)
    ai, pi, ni = trip[:, 0], trip[:, 1], trip[:, 2]
    s_ap = (u_hat[ai] * u_hat[pi]).sum(axis=1)
    s_an = (u_hat[ai] * u_hat[ni]).sum(axis=1)
    d = s_ap - s_an
    loss = float(np.logaddexp(0.0, -d).sum())
    if not need_grad:
        return loss, None

    w = -expit(-d)                          # dL/dd per triplet
    gu = np.zeros_like(u)

    def pair_grad(i, j, coef, s):
        # d s(u_i, u_j) / d u_i = (u_hat_j - s * u_hat_i) / ||u_i||
        np.add.at(gu, i, coef[:, None] * (u_hat[j] - s[:, None] * u_hat[i]) / norms[i][:, None])
        np.add.at(gu, j, coef[:, None] * (u_hat[i] - s[:, None] * u_hat[j]) / norms[j][:, None])

    pair_grad(ai, pi, w, s_ap)
    pair_grad(ai, ni, -w, s_an)
    grad = np.triu(gu.T @ e)
    return loss, grad


def mine_triplets(embeddings, labels, a, n_hard: int = 1500,
                  max_per_anchor: int | None = None) -> list[tuple[int, int, int]]:
    """Build (anchor, positive, negative) index triplets.

    Every embedding with at least one same-label partner serves as an
    anchor; all its positives are used, and its negatives are the n_hard
    highest-scoring different-label embeddings under the current transform
    (ties broken by index).  ``max_per_anchor`` caps the positive x negative
    pairing per anchor, in deterministic order.
    """
    labels = np.asarray(labels)
    _, _, _, u_hat = _transformed_unit_rows(a, embeddings)
    scores = u_hat @ u_hat.T
    n = len(labels)
    triplets: list[tuple[int, int, int]] = []
    found_anchor = False
    for i in range(n):
        positives = np.flatnonzero((labels == labels[i]) & (np.arange(n) != i))
        if positives.size == 0:
            continue
        found_anchor = True
        negatives = np.flatnonzero(labels != labels[i])
        if negatives.size == 0:
            continue
        order = negatives[np.argsort(-scores[i, negatives], kind="stable")]
        hard = order[: min(n_hard, order.size)]
        count = 0
        for p in positives:
            for neg in hard:
                if max_per_anchor is not None and count >= max_per_anchor:
                    break
                triplets.append((i, int(p), int(neg)))
                count += 1
            if max_per_anchor is not None and count >= max_per_anchor:
                break
    if not found_anchor:
        raise ValueError("insufficient positives: no speaker has two embeddings")
    if not triplets:
        raise ValueError("insufficient positives: need at least two speakers")
    return triplets


@dataclass
class CsmlTrainConfig:
    """Options for fitting the cosine transform."""

    epochs: int = 20
    steps_per_epoch: int = 4
    n_hard: int = 1500
    max_per_anchor: int | None = None
    max_triplets: int | None = 100_000
    val_fraction: float = 0.25
    max_val_trials: int = 5000
    diag_floor: float = 1e-4
    seed: int = 0


def _project_upper(matrix: np.ndarray, diag_floor: float) -> np.ndarray:
    out = np.triu(matrix)
    d = np.diag(out).copy()
    np.fill_diagonal(out, np.maximum(d, diag_floor))
    return out


def _val_score_set(embeddings, labels, indices, a, rng, max_trials) -> ScoreSet:
    idx = np.asarray(indices)
    labels = np.asarray(labels)
    pairs = [(i, j) for k, i in enumerate(idx) for j in idx[k + 1 :]]
    if len(pairs) > max_trials:
        keep = rng.choice(len(pairs), size=max_trials, replace=False)
        pairs = [pairs[k] for k in sorted(keep)]
    trials, scores = [], []
    for i, j in pairs:
        trials.append(Trial(str(i), str(j), bool(labels[i] == labels[j])))
        scores.append(csml_score(embeddings[i], embeddings[j], a))
    return ScoreSet(trials, np.asarray(scores))


def csml_validation_eer(embeddings, labels, indices, a, seed: int = 0,
                        max_trials: int = 5000) -> float:
    rng = np.random.default_rng(seed)
    return compute_eer(_val_score_set(embeddings, labels, indices, a, rng, max_trials))


def train_csml(embeddings, labels, opts: CsmlTrainConfig | None = None) -> CsmlTransform:
    """Fit the upper-triangular cosine transform by triplet-loss descent.

    Starts from the identity, remines triplets every epoch, takes
    backtracking full-batch gradient steps with the diagonal floored, and
    returns the candidate with the best held-out EER (the identity start
    is always a candidate).
    """
    if opts is None:
        opts = CsmlTrainConfig()
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    dim = embeddings.shape[1]
    rng = np.random.default_rng(opts.seed)

    # Per-speaker split so validation has target trials.
    train_idx, val_idx = [], []
    for spk in np.unique(labels):
        members = np.flatnonzero(labels == spk)
        members = members[rng.permutation(members.size)]
        n_val = max(1, int(round(opts.val_fraction * members.size))) if members.size > 1 else 0
        val_idx.extend(members[:n_val])
        train_idx.extend(members[n_val:])
    train_idx = np.sort(np.asarray(train_idx, dtype=np.intp))
    val_idx = np.sort(np.asarray(val_idx, dtype=np.intp))

    def has_both_trial_kinds(idx):
        if idx.size < 2 or len(np.unique(labels[idx])) < 2:
            return False
        counts = [np.sum(labels[idx] == s) for s in np.unique(labels[idx])]
        return max(counts) >= 2
    if not has_both_trial_kinds(val_idx):
        val_idx = np.arange(len(labels))
    if train_idx.size < 2 or len(np.unique(labels[train_idx])) < 2 \
            or not any(np.sum(labels[train_idx] == s) >= 2
                       for s in np.unique(labels[train_idx])):
        train_idx = np.arange(len(labels))

    a = np.eye(dim)
    val_rng = np.random.default_rng(opts.seed + 1)
    best = CsmlTransform(a.copy())
    best_eer = compute_eer(_val_score_set(embeddings, labels, val_idx, a, val_rng, opts.max_val_trials))

    train_emb = embeddings[train_idx]
    train_lab = labels[train_idx]
    for _ in range(opts.epochs):
        n_impostors = min((train_lab != spk).sum() for spk in np.unique(train_lab))
        triplets = mine_triplets(train_emb, train_lab, a,
                                 n_hard=min(opts.n_hard, int(n_impostors)),
                                 max_per_anchor=opts.max_per_anchor)
        if opts.max_triplets is not None and len(triplets) > opts.max_triplets:
            keep = rng.choice(len(triplets), size=opts.max_triplets, replace=False)
            triplets = [triplets[k] for k in sorted(keep)]
        for _ in range(opts.steps_per_epoch):
            loss, grad = triplet_loss_and_grad(a, train_emb, triplets)
            gnorm2 = float((grad ** 2).sum())
            if gnorm2 < 1e-18:
                break
            step = 1.0 / max(1.0, np.sqrt(gnorm2))
            accepted = False
            for _ in range(30):
                cand = _project_upper(a - step * grad, opts.diag_floor)
                cand_loss, _ = triplet_loss_and_grad(cand, train_emb, triplets, need_grad=False)
                if cand_loss <= loss - 1e-4 * step * gnorm2:
                    a = cand
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
        val_rng = np.random.default_rng(opts.seed + 1)
        eer = compute_eer(_val_score_set(embeddings, labels, val_idx, a, val_rng, opts.max_val_trials))
        if eer <= best_eer:                # ties keep the most-trained candidate
            best_eer = eer
            best = CsmlTransform(a.copy())
    return best


# ---------------------------------------------------------------------------
# centering, LDA, PLDA


def center(embeddings, dev_mean) -> np.ndarray:
    """Subtract an in-domain development-set mean from every embedding."""
    e = np.asarray(embeddings, dtype=np.float64)
    mean = np.asarray(dev_mean, dtype=np.float64)
    if mean.shape != (e.shape[-1],):
        raise ValueError("dimension error: mean length must match embedding dim")
    return e - mean


def length_normalize(embeddings) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("degenerate embedding: zero norm")
    return e / norms


def _scatter_matrices(embeddings, labels):
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    n, d = e.shape
    mean = e.mean(axis=0)
    s_w = np.zeros((d, d))
    s_b = np.zeros((d, d))
    for c in classes:
        members = e[labels == c]
        mu_c = members.mean(axis=0)
        centered = members - mu_c
        s_w += centered.T @ centered
        diff = mu_c - mean
        s_b += members.shape[0] * np.outer(diff, diff)
    return s_w / n, s_b / n, mean, classes


def _ridge(matrix: np.ndarray, rel: float = 1e-6) -> np.ndarray:
    d = matrix.shape[0]
    return matrix + (rel * np.trace(matrix) / d + 1e-12) * np.eye(d)


@dataclass
class LdaProjection:
    """Rows are generalized eigenvectors ordered by decreasing eigenvalue."""

    matrix: np.ndarray
    eigenvalues: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]


def lda_fit(embeddings, labels, out_dim: int) -> LdaProjection:
    """Projection maximizing between-class over within-class scatter."""
    s_w, s_b, _, classes = _scatter_matrices(embeddings, labels)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    d = s_w.shape[0]
    if not 0 < out_dim <= d:
        raise ValueError(f"out_dim must be in [1, {d}]")
    try:
        cholesky(s_w, lower=True)
    except np.linalg.LinAlgError:
        s_w = _ridge(s_w)
    vals, vecs = eigh(s_b, s_w)
    order = np.argsort(vals)[::-1][:out_dim]
    return LdaProjection(vecs[:, order].T.copy(), vals[order].copy())


def lda_project(projection: LdaProjection, x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) @ projection.matrix.T


@dataclass
class PldaModel:
    """Two-covariance generative model with optional preprocessing.

    A speaker's latent mean is Gaussian around ``mean`` with covariance
    ``between``; observations scatter around it with covariance ``within``.
    """

    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray
    lda: LdaProjection | None = None
    length_norm: bool = True


def plda_preprocess(model: PldaModel, x) -> np.ndarray:
    e = np.asarray(x, dtype=np.float64)
    if model.length_norm:
        e = length_normalize(e)
    if model.lda is not None:
        e = lda_project(model.lda, e)
    return e


def plda_fit(embeddings, labels, n_iter: int = 15, lda_dim: int | None = None,
             length_norm: bool = True) -> PldaModel:
    """Fit the two-covariance model by EM over per-speaker latent means."""
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2 or not any((labels == c).sum() >= 2 for c in classes):
        raise ValueError("need at least 2 classes with 2 samples each")

    lda = None
    if length_norm:
        e = length_normalize(e)
    if lda_dim is not None:
        lda = lda_fit(e, labels, lda_dim)
        e = lda_project(lda, e)

    d = e.shape[1]
    n_total = e.shape[0]
    groups = []
    for c in classes:
        members = e[labels == c]
        mu_c = members.mean(axis=0)
        centered = members - mu_c
        groups.append((members.shape[0], mu_c, centered.T @ centered))

    s_w, s_b, mean, _ = _scatter_matrices(e, labels)
    between = _ridge(s_b)
    within = _ridge(s_w)

    for _ in range(n_iter):
        b_inv = np.linalg.inv(between)
        w_inv = np.linalg.inv(within)
        counts = sorted({n_k for n_k, _, _ in groups})
        post_cov = {n_k: np.linalg.inv(b_inv + n_k * w_inv) for n_k in counts}
        sum_y = np.zeros(d)
        sum_b = np.zeros((d, d))
        sum_w = np.zeros((d, d))
        y_means = []
        for n_k, mu_k, s_k in groups:
            cov_k = post_cov[n_k]
            y_k = cov_k @ (b_inv @ mean + n_k * (w_inv @ mu_k))
            y_means.append((n_k, mu_k, s_k, y_k, cov_k))
            sum_y += y_k
        new_mean = sum_y / len(groups)
        for n_k, mu_k, s_k, y_k, cov_k in y_means:
            diff = y_k - new_mean
            sum_b += cov_k + np.outer(diff, diff)
            resid = mu_k - y_k
            sum_w += s_k + n_k * (np.outer(resid, resid) + cov_k)
        mean = new_mean
        between = _ridge((sum_b + sum_b.T) / (2 * len(groups)), rel=1e-10)
        within = _ridge((sum_w + sum_w.T) / (2 * n_total), rel=1e-10)

    return PldaModel(mean, between, within, lda=lda, length_norm=length_norm)


def _gaussian_logpdf(x_centered: np.ndarray, chol_lower: np.ndarray) -> np.ndarray:
    solved = solve_triangular(chol_lower, x_centered.T, lower=True)
    logdet = 2.0 * np.log(np.diag(chol_lower)).sum()
    k = chol_lower.shape[0]
    return -0.5 * ((solved ** 2).sum(axis=0) + logdet + k * np.log(2.0 * np.pi))


def plda_score_many(model: PldaModel, enroll, test, preprocess: bool = True) -> np.ndarray:
    """Log-likelihood ratio log p(pair | same) - log p(pair | different)."""
    e1 = np.atleast_2d(np.asarray(enroll, dtype=np.float64))
    e2 = np.atleast_2d(np.asarray(test, dtype=np.float64))
    if preprocess:
        e1 = plda_preprocess(model, e1)
        e2 = plda_preprocess(model, e2)
    d = model.mean.shape[0]
    total = model.between + model.within
    joint = np.block([[total, model.between], [model.between, total]])
    chol_total = cholesky(total, lower=True)
    chol_joint = cholesky(joint, lower=True)
    u1 = e1 - model.mean
    u2 = e2 - model.mean
    ll_same = _gaussian_logpdf(np.hstack([u1, u2]), chol_joint)
    ll_diff = _gaussian_logpdf(u1, chol_total) + _gaussian_logpdf(u2, chol_total)
    return ll_same - ll_diff


def plda_score(model: PldaModel, e1, e2, preprocess: bool = True) -> float:
    return float(plda_score_many(model, [e1], [e2], preprocess=preprocess)[0])
