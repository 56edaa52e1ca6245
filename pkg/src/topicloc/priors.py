"""Fixed model parameters: supervision encoding and prior construction.

Topics are laid out as ``[foreground 0..C-1 | background C..K-1]``.  A
document's label set is encoded into a Dirichlet concentration vector
over that layout: present classes get weight 1, absent classes weight 0
(implemented downstream as hard exclusion of the topic), background
topics always weight 1, and documents with unknown labels get a small
uniform foreground weight so every class stays available but few are
expected per image.

The appearance prior for class k is the clipped difference between the
mean word histogram of images labelled k and the mean over all images:
words that are consistently over-represented where the class occurs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import Corpus

__all__ = [
    "NormalWishart",
    "HyperParams",
    "PriorError",
    "encode_alpha",
    "admissible_mask",
    "compute_appearance_prior",
    "default_nw_prior",
    "build_hyperparams",
    "load_prior_rows",
]

# Strictly positive floor on every Dirichlet pseudo-count: digamma-based
# updates need positive parameters even when the differential prior is
# all-zero (identical histograms, or prior scale 0).
PI0_FLOOR = 1e-2


class PriorError(ValueError):
    """Raised when a prior cannot be constructed from the given corpus."""


@dataclass(frozen=True)
class NormalWishart:
    """Parameters of a Normal-Wishart over a 2-D Gaussian's (mean, precision)."""

    mu: np.ndarray      # (2,)
    w: np.ndarray       # (2, 2) scale matrix, symmetric positive definite
    beta: float
    v: float

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64).reshape(2))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=np.float64).reshape(2, 2))

    def validate(self) -> None:
        if not np.allclose(self.w, self.w.T):
            raise PriorError("Normal-Wishart scale matrix must be symmetric")
        try:
            np.linalg.cholesky(self.w)
        except np.linalg.LinAlgError as exc:
            raise PriorError("Normal-Wishart scale matrix must be positive definite") from exc
        if self.beta <= 0:
            raise PriorError(f"Normal-Wishart beta must be positive, got {self.beta}")
        if self.v <= 1:
            raise PriorError(f"Normal-Wishart v must exceed 1 for 2-D data, got {self.v}")

    def mean_covariance(self) -> np.ndarray:
        """Posterior-mean covariance E[Lambda^-1] = W^-1 / (v - D - 1); needs v > 3."""
        if self.v <= 3:
            raise PriorError(f"mean covariance undefined for v = {self.v} <= D + 1")
        return np.linalg.inv(self.w) / (self.v - 3.0)


@dataclass(frozen=True)
class HyperParams:
    """Everything fixed during inference."""

    num_classes: int
    k_bg: int
    pi0: np.ndarray                 # (K, vocab) appearance pseudo-counts
    nw0: NormalWishart              # shared spatial prior for foreground topics
    alpha_fg_present: float = 1.0
    alpha_bg: float = 1.0
    alpha_ssl: float = 0.1
    iterations: int = 100
    spatial_enabled: bool = True
    appearance_prior_enabled: bool = True
    prior_scale: float = 1.0
    elbo_tol: float = 1e-6          # early-stop threshold; 0 disables early stopping

    def __post_init__(self):
        object.__setattr__(self, "pi0", np.asarray(self.pi0, dtype=np.float64))
        if self.k_bg < 1:
            raise PriorError(f"k_bg must be >= 1, got {self.k_bg}")
        if self.num_classes < 0:
            raise PriorError("num_classes must be >= 0")
        if self.pi0.shape[0] != self.num_classes + self.k_bg:
            raise PriorError(
                f"pi0 has {self.pi0.shape[0]} rows, expected K = {self.num_classes + self.k_bg}"
            )
        if np.any(self.pi0 < 0) or not np.all(np.isfinite(self.pi0)):
            raise PriorError("pi0 entries must be finite and >= 0")
        for name in ("alpha_fg_present", "alpha_bg", "alpha_ssl"):
            if getattr(self, name) <= 0:
                raise PriorError(f"{name} must be positive")
        if self.iterations < 0:
            raise PriorError("iterations must be >= 0")
        self.nw0.validate()

    @property
    def k_fg(self) -> int:
        return self.num_classes

    @property
    def k(self) -> int:
        return self.num_classes + self.k_bg

    @property
    def vocab_size(self) -> int:
        return self.pi0.shape[1]


def encode_alpha(labels: frozenset[int] | set[int] | None, hyper: HyperParams) -> np.ndarray:
    """Turn a weak label set (or None for unknown) into the K concentration vector."""
    c, k = hyper.num_classes, hyper.k
    alpha = np.empty(k)
    alpha[c:] = hyper.alpha_bg
    if labels is None:
        alpha[:c] = hyper.alpha_ssl
        return alpha
    alpha[:c] = 0.0
    for cls in labels:
        if cls < 0 or cls >= c:
            raise PriorError(f"label {cls} outside [0, {c})")
        alpha[cls] = hyper.alpha_fg_present
    return alpha


def admissible_mask(labels: frozenset[int] | set[int] | None, hyper: HyperParams) -> np.ndarray:
    """Boolean mask of topics a document may use (alpha > 0)."""
    return encode_alpha(labels, hyper) > 0


def _normalized_histograms(corpus: Corpus) -> np.ndarray:
    """(J, vocab) per-document word histograms, each summing to 1.

    Normalization keeps large images from dominating the class means.
    """
    h = np.zeros((len(corpus), corpus.vocab_size))
    for j, doc in enumerate(corpus):
        if len(doc) == 0:
            continue
        np.add.at(h[j], doc.words, 1.0)
        h[j] /= len(doc)
    return h


def compute_appearance_prior(corpus: Corpus, hyper: HyperParams) -> np.ndarray:
    """Build the (K, vocab) appearance pseudo-count matrix.

    Foreground row k is ``prior_scale * max(0, mean histogram of images
    labelled k - mean histogram of all images)`` plus the positivity floor;
    background rows are the bare floor.  With the appearance prior disabled
    all rows are the uniform floor.
    """
    k, nv = hyper.k, corpus.vocab_size
    pi0 = np.full((k, nv), PI0_FLOOR)
    if not hyper.appearance_prior_enabled or hyper.num_classes == 0:
        return pi0
    if len(corpus) == 0:
        raise PriorError("appearance prior needs a non-empty corpus")

    h = _normalized_histograms(corpus)
    global_mean = h.mean(axis=0)
    for cls in range(hyper.num_classes):
        rows = [j for j, doc in enumerate(corpus) if doc.labels is not None and cls in doc.labels]
        if not rows:
            raise PriorError(f"class {cls} has no labelled documents; appearance prior undefined")
        diff = h[rows].mean(axis=0) - global_mean
        pi0[cls] += hyper.prior_scale * np.maximum(diff, 0.0)
    return pi0


def default_nw_prior(corpus: Corpus) -> NormalWishart:
    """Spatial prior centred on the mean image, sized so the prior-expected
    two-sigma box covers about half the mean image area (beta=1, v=5)."""
    if len(corpus) == 0:
        raise PriorError("spatial prior needs a non-empty corpus")
    mean_w = float(np.mean([d.width for d in corpus]))
    mean_h = float(np.mean([d.height for d in corpus]))
    area = mean_w * mean_h
    v0 = 5.0
    # E[Sigma] = W^-1/(v-3); a 2-sigma box of isotropic Sigma = s2*I has
    # area 16*s2, so target s2 = area/32.
    s2 = area / 32.0
    w0 = np.eye(2) / (s2 * (v0 - 3.0))
    return NormalWishart(mu=np.array([mean_w / 2.0, mean_h / 2.0]), w=w0, beta=1.0, v=v0)


def load_prior_rows(path, num_classes: int, vocab_size: int) -> np.ndarray:
    """Read an injected appearance prior: one whitespace-separated row of
    ``vocab_size`` non-negative reals per class."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            values = np.array(line.split(), dtype=np.float64)
            if values.size != vocab_size:
                raise PriorError(
                    f"prior file line {line_no}: expected {vocab_size} values, got {values.size}"
                )
            if np.any(values < 0) or not np.all(np.isfinite(values)):
                raise PriorError(f"prior file line {line_no}: entries must be finite and >= 0")
            rows.append(values)
    if len(rows) != num_classes:
        raise PriorError(f"prior file has {len(rows)} rows, expected one per class ({num_classes})")
    return np.array(rows).reshape(num_classes, vocab_size)


def build_hyperparams(
    corpus: Corpus,
    num_classes: int,
    k_bg: int = 20,
    alpha_ssl: float = 0.1,
    iterations: int = 100,
    spatial_enabled: bool = True,
    appearance_prior_enabled: bool = True,
    prior_scale: float | None = None,
    prior_rows: np.ndarray | None = None,
    elbo_tol: float = 1e-6,
) -> HyperParams:
    """Assemble HyperParams from a training corpus.

    ``prior_scale`` defaults to vocab_size/100 so the differential prior
    carries a visible but non-dominant pseudo-count mass.  ``prior_rows``
    replaces the computed foreground rows (externally transferred priors).
    """
    if prior_scale is None:
        prior_scale = corpus.vocab_size / 100.0
    hyper = HyperParams(
        num_classes=num_classes,
        k_bg=k_bg,
        pi0=np.full((num_classes + k_bg, corpus.vocab_size), PI0_FLOOR),
        nw0=default_nw_prior(corpus),
        alpha_ssl=alpha_ssl,
        iterations=iterations,
        spatial_enabled=spatial_enabled,
        appearance_prior_enabled=appearance_prior_enabled,
        prior_scale=prior_scale,
        elbo_tol=elbo_tol,
    )
    if prior_rows is not None:
        prior_rows = np.asarray(prior_rows, dtype=np.float64)
        if prior_rows.shape != (num_classes, corpus.vocab_size):
            raise PriorError(
                f"injected prior shape {prior_rows.shape} != ({num_classes}, {corpus.vocab_size})"
            )
        pi0 = np.full((num_classes + k_bg, corpus.vocab_size), PI0_FLOOR)
        pi0[:num_classes] += prior_rows
    else:
        pi0 = compute_appearance_prior(corpus, hyper)
    return replace(hyper, pi0=pi0)
