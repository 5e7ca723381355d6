"""Simplex ETFs, feature statistics and the neural-collapse metric suite.

Features are stored column-wise: ``H`` has shape (d, N) and ``labels`` holds
integer classes in ``0..C-1``. Classifiers ``W`` have shape (C, d).
"""
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import (
    ConstraintError,
    DegenerateFeaturesError,
    DimensionError,
    DomainError,
    MissingClassError,
)

ORTHONORMAL_TOL = 1e-10
PINV_RCOND = 1e-10
DEGENERATE_TOL = 1e-12


def centring_matrix(C):
    """``I_C - 11^T / C``."""
    return np.eye(C) - np.full((C, C), 1.0 / C)


def standard_etf(C):
    """The C×C simplex ETF scaled to unit Frobenius norm, ``(I - 11^T/C) / sqrt(C-1)``."""
    if C < 2:
        raise DomainError(f"a simplex ETF needs at least 2 classes, got C={C}")
    return centring_matrix(C) / np.sqrt(C - 1)


def unit_column_etf(C):
    """The C×C simplex ETF whose columns have unit Euclidean norm."""
    if C < 2:
        raise DomainError(f"a simplex ETF needs at least 2 classes, got C={C}")
    return np.sqrt(C / (C - 1)) * centring_matrix(C)


def orthonormality_residual(U):
    U = np.asarray(U)
    return np.linalg.norm(U.T @ U - np.eye(U.shape[1]))


def canonical_directions(d, C):
    """Identity block in the first C rows, zeros below."""
    if d < C:
        raise DimensionError(f"need d >= C, got d={d}, C={C}")
    return np.eye(d, C)


def haar_directions(d, C, rng):
    """Orthonormal d×C frame drawn from the Haar measure (QR of a Gaussian with sign fix)."""
    if d < C:
        raise DimensionError(f"need d >= C, got d={d}, C={C}")
    Q, R = np.linalg.qr(rng.standard_normal((d, C)))
    return Q * np.sign(np.diag(R))


@dataclass(frozen=True, eq=False)
class SimplexEtf:
    C: int
    d: int
    alpha: float
    rotation: np.ndarray
    matrix: np.ndarray


def build_simplex_etf(C, d, alpha=1.0, rotation=None):
    """General simplex ETF ``alpha * sqrt(C/(C-1)) * U (I - 11^T/C)`` of shape (d, C)."""
    if d < C:
        raise DimensionError(f"need d >= C, got d={d}, C={C}")
    if alpha <= 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    U = canonical_directions(d, C) if rotation is None else np.asarray(rotation, dtype=float)
    if U.shape != (d, C):
        raise DimensionError(f"rotation must be {d}x{C}, got {U.shape}")
    if orthonormality_residual(U) > ORTHONORMAL_TOL:
        raise ConstraintError("rotation does not have orthonormal columns")
    M = alpha * U @ unit_column_etf(C)
    return SimplexEtf(C=C, d=d, alpha=alpha, rotation=U, matrix=M)


@dataclass(frozen=True, eq=False)
class FeatureStatistics:
    global_mean: np.ndarray  # (d,)
    class_means: np.ndarray  # (d, C)
    centred: np.ndarray  # (d, C), H_bar
    normalised: np.ndarray  # (d, C), H_tilde
    counts: np.ndarray  # (C,)

    @property
    def centred_norm(self):
        return np.linalg.norm(self.centred)


def _check_features(H, labels):
    H = np.asarray(H, dtype=float)
    labels = np.asarray(labels)
    if H.ndim != 2 or labels.ndim != 1 or H.shape[1] != labels.size:
        raise DimensionError(f"features {H.shape} and labels {labels.shape} do not match")
    if labels.size == 0:
        raise DimensionError("need at least one sample")
    return H, labels


def class_sums(H, labels, C):
    """Per-class column sums as a d×C matrix (one-hot product, BLAS-backed)."""
    onehot = np.zeros((labels.size, C))
    onehot[np.arange(labels.size), labels] = 1.0
    return H @ onehot


def compute_feature_statistics(H, labels, num_classes=None):
    """Global mean, per-class means, centred means ``H_bar`` and ``H_tilde = H_bar / ||H_bar||_F``."""
    H, labels = _check_features(H, labels)
    C = int(labels.max()) + 1 if num_classes is None else num_classes
    counts = np.bincount(labels, minlength=C)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise MissingClassError(f"classes without samples: {missing}")
    global_mean = H.mean(axis=1)
    class_means = class_sums(H, labels, C) / counts
    centred = class_means - global_mean[:, None]
    norm = np.linalg.norm(centred)
    # identical features can leave rounding-level residue in the centred means
    if norm <= DEGENERATE_TOL * (1.0 + np.linalg.norm(class_means)):
        raise DegenerateFeaturesError("centred class means are all zero")
    return FeatureStatistics(global_mean, class_means, centred, centred / norm, counts)


def within_class_covariance(H, labels, class_means):
    diff = H - class_means[:, labels]
    return diff @ diff.T / H.shape[1]


def between_class_covariance(centred):
    return centred @ centred.T / centred.shape[1]


def nc1(H, labels, num_classes=None):
    """Within-class variability ``Tr(Sigma_W Sigma_B^+) / C``.

    Uses the thin SVD of the centred means, ``Sigma_B^+ = C P S^-2 P^T``, so the
    d×d pseudo-inverse is never formed. Singular values of ``Sigma_B`` below
    ``1e-10 * max`` are treated as zero.
    """
    H, labels = _check_features(H, labels)
    if (int(labels.max()) + 1 if num_classes is None else num_classes) < 2:
        raise DomainError("NC1 needs at least two classes")
    stats = compute_feature_statistics(H, labels, num_classes)
    P, s, _ = np.linalg.svd(stats.centred, full_matrices=False)
    keep = s**2 > PINV_RCOND * s[0] ** 2
    P, s = P[:, keep], s[keep]
    within = H - stats.class_means[:, labels]
    projected = (P.T @ within) / s[:, None]
    # (1/C) Tr(Sigma_W Sigma_B^+) = (1/C) * C/N * ||S^-1 P^T (H - means)||^2
    return float(np.sum(projected**2) / H.shape[1])


def _etf_gap(product):
    norm = np.linalg.norm(product)
    if norm == 0.0:
        raise DomainError("cannot normalise a zero matrix")
    return float(np.linalg.norm(product / norm - standard_etf(product.shape[0])))


def nc2(W):
    """Distance of the normalised classifier Gram ``WW^T`` from the standard ETF."""
    W = np.asarray(W, dtype=float)
    return _etf_gap(W @ W.T)


def nc3(W, H_bar):
    """Self-duality gap between ``W`` (C×d) and the centred means ``H_bar`` (d×C)."""
    W, H_bar = np.asarray(W, dtype=float), np.asarray(H_bar, dtype=float)
    if W.shape[::-1] != H_bar.shape:
        raise DimensionError(f"W {W.shape} and H_bar {H_bar.shape} are not dual shapes")
    return _etf_gap(W @ H_bar)


def nc4_agreement(W, b, H, labels, class_means):
    """Fraction of samples where the classifier and the nearest-class-centre rule agree.

    Ties resolve to the lowest class index in both rules.
    """
    H, labels = _check_features(H, labels)
    W = np.asarray(W, dtype=float)
    b = np.zeros(W.shape[0]) if b is None else np.asarray(b, dtype=float)
    predicted = np.argmax(W @ H + b[:, None], axis=0)
    sq_dist = (
        np.sum(H**2, axis=0)[None, :]
        - 2.0 * class_means.T @ H
        + np.sum(class_means**2, axis=0)[:, None]
    )
    nearest = np.argmin(sq_dist, axis=0)
    return float(np.mean(predicted == nearest))


def _norm_ratio(norms):
    avg = norms.mean()
    if avg == 0.0:
        raise DomainError("average norm is zero")
    return norms.std() / avg


def equinorm_gap(W, H_bar):
    """``|std/avg of classifier row norms - std/avg of centred-mean norms|``."""
    w = _norm_ratio(np.linalg.norm(np.asarray(W, dtype=float), axis=1))
    h = _norm_ratio(np.linalg.norm(np.asarray(H_bar, dtype=float), axis=0))
    return float(abs(w - h))


def cosine_margins(W, H, labels, global_mean=None):
    """Per-sample cosine margin against centred classifier rows.

    Weights are centred by the mean classifier row and features by the global
    feature mean. Samples whose centred feature has zero norm get ``nan``.
    """
    H, labels = _check_features(H, labels)
    W = np.asarray(W, dtype=float)
    Wc = W - W.mean(axis=0)
    w_norm = np.linalg.norm(Wc, axis=1)
    if np.any(w_norm == 0.0):
        raise DomainError("a centred classifier row has zero norm")
    h_G = H.mean(axis=1) if global_mean is None else global_mean
    Hc = H - h_G[:, None]
    h_norm = np.linalg.norm(Hc, axis=0)
    bad = h_norm == 0.0
    if np.any(bad):
        warnings.warn(f"{int(bad.sum())} samples have zero centred norm; margin set to nan")
    cos = (Wc / w_norm[:, None]) @ Hc / np.where(bad, 1.0, h_norm)
    idx = np.arange(labels.size)
    own = cos[labels, idx]
    cos[labels, idx] = -np.inf
    margins = own - cos.max(axis=0)
    margins[bad] = np.nan
    return margins


def theoretical_margin(C):
    return C / (C - 1)


@dataclass
class NcMetricsRecord:
    nc1: float
    nc2: float
    nc3: float
    nc4_agreement: float
    equinorm_gap: float
    mean_cosine_margin: float
    cosine_margins: np.ndarray = None

    def as_dict(self, include_margins=False):
        out = asdict(self)
        if not include_margins:
            out.pop("cosine_margins")
        return out


def collect_metrics(W, b, H, labels, num_classes=None, keep_margins=False):
    stats = compute_feature_statistics(H, labels, num_classes)
    margins = cosine_margins(W, H, labels, stats.global_mean)
    return NcMetricsRecord(
        nc1=nc1(H, labels, num_classes),
        nc2=nc2(W),
        nc3=nc3(W, stats.centred),
        nc4_agreement=nc4_agreement(W, b, H, labels, stats.class_means),
        equinorm_gap=equinorm_gap(W, stats.centred),
        mean_cosine_margin=float(np.nanmean(margins)),
        cosine_margins=margins if keep_margins else None,
    )
