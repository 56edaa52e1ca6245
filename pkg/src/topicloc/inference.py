"""Variational inference engine for the joint localisation topic model.

Mean-field coordinate ascent over a factored posterior
``q = prod_k q(pi_k) prod_j q(theta_j) q(mu_jk, Lambda_jk) prod_i q(y_ij)``:

* per-word topic responsibilities combine a word-appearance message
  ``exp(psi(pi[k, x]) - psi(sum_v pi[k, v]) + psi(theta_k))`` with a
  spatial factor: the Student-t predictive of the topic's Normal-Wishart
  posterior for foreground topics, the uniform density ``1/(w*h)`` for
  background topics;
* ``theta_jk = alpha_jk + sum_i resp_ik`` and
  ``pi_vk = pi0_vk + sum_ij [x_ij = v] resp_ijk`` are the conjugate
  Dirichlet updates;
* each foreground topic keeps one Normal-Wishart location posterior per
  image, refit from responsibility-weighted moments.

Supervision enters only through alpha: absent classes have alpha 0 and are
hard-excluded (their responsibilities stay exactly 0), unknown-label
documents use a small uniform foreground alpha.

All responsibility arithmetic is done in log space with per-row max
subtraction.  Per-document updates depend only on that document and a
frozen appearance snapshot, so sweeps can run on a process pool; the
appearance reduction always runs in document-id order, making parallel
and serial training bit-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .corpus import Corpus, Document
from .ioutil import atomic_write_bytes
from .priors import HyperParams, NormalWishart, encode_alpha

__all__ = [
    "GlobalState",
    "ImageState",
    "Model",
    "IndependentModel",
    "InferenceError",
    "digamma",
    "init_state",
    "update_theta",
    "spatial_predictive",
    "update_responsibilities",
    "update_nw",
    "update_appearance",
    "compute_elbo",
    "elbo_components",
    "fit",
    "fit_with_states",
    "infer_heldout",
    "save_model",
    "load_model",
]

LOG_2PI = math.log(2.0 * math.pi)

# Below this effective count a topic's spatial posterior falls back to the prior.
NW_COUNT_FLOOR = 1e-8

# Symmetry-breaking noise added to pi0 at initialization.
INIT_PI_JITTER = 1e-2


class InferenceError(RuntimeError):
    """Raised on invalid inference inputs or corrupted numerical state."""


# ---------------------------------------------------------------------------
# special functions


def digamma(x):
    """Digamma (psi) for x > 0, via upward recurrence and the asymptotic series.

    Arguments are shifted with ``psi(x) = psi(x+1) - 1/x`` until >= 8, where
    the Bernoulli-number series through x^-14 is accurate to ~1e-15 relative.
    Accepts scalars or arrays; raises on any non-positive entry.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and not np.all(arr > 0):
        raise InferenceError("digamma requires strictly positive arguments")
    scalar = arr.ndim == 0
    z = np.atleast_1d(arr).copy()
    acc = np.zeros_like(z)
    for _ in range(8):
        mask = z < 8.0
        if not mask.any():
            break
        acc[mask] -= 1.0 / z[mask]
        z[mask] += 1.0
    r2 = 1.0 / (z * z)
    tail = r2 * (
        1.0 / 12.0
        - r2 * (1.0 / 120.0
                - r2 * (1.0 / 252.0
                        - r2 * (1.0 / 240.0
                                - r2 * (1.0 / 132.0
                                        - r2 * (691.0 / 32760.0 - r2 / 12.0)))))
    )
    out = acc + np.log(z) - 0.5 / z - tail
    return float(out[0]) if scalar else out.reshape(arr.shape)


def _inv2(m: np.ndarray) -> np.ndarray:
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    return np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]]) / det


def _logdet2(m: np.ndarray) -> float:
    return math.log(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])


def _st_logpdf(xy: np.ndarray, nw: NormalWishart) -> np.ndarray:
    """Log Student-t predictive density of the NW posterior at rows of xy.

    This is the exact marginal int N(l | mu, Lambda^-1) dNW(mu, Lambda):
    dof nu = v - 1 (D = 2) and scale-precision (nu*beta/(1+beta)) * W.
    """
    nu = nw.v - 1.0
    c = nu * nw.beta / (1.0 + nw.beta)
    d = xy - nw.mu
    # quadratic form under c*W
    quad = c * (
        nw.w[0, 0] * d[:, 0] ** 2
        + (nw.w[0, 1] + nw.w[1, 0]) * d[:, 0] * d[:, 1]
        + nw.w[1, 1] * d[:, 1] ** 2
    )
    logdet = 2.0 * math.log(c) + _logdet2(nw.w)
    return (
        gammaln(0.5 * (nu + 2.0))
        - gammaln(0.5 * nu)
        - math.log(nu * math.pi)
        + 0.5 * logdet
        - 0.5 * (nu + 2.0) * np.log1p(quad / nu)
    )


def spatial_predictive(loc, nw: NormalWishart) -> float:
    """Student-t predictive density at a single location."""
    nw.validate()
    loc = np.asarray(loc, dtype=np.float64).reshape(1, 2)
    return float(np.exp(_st_logpdf(loc, nw)))


# ---------------------------------------------------------------------------
# state


@dataclass(eq=False)
class GlobalState:
    """Variational Dirichlet parameters of the per-topic word distributions."""

    pi: np.ndarray  # (K, vocab), strictly positive


@dataclass(eq=False)
class ImageState:
    """Per-document variational state."""

    alpha: np.ndarray            # (K,) encoded supervision
    admissible: np.ndarray       # (K,) bool, alpha > 0
    theta: np.ndarray            # (K,) Dirichlet parameters of q(theta)
    resp: np.ndarray             # (N, K) responsibilities, excluded columns exactly 0
    nw: list[NormalWishart]      # per foreground topic location posterior


@dataclass(eq=False)
class Model:
    hyper: HyperParams
    global_state: GlobalState
    elbo_trace: list[float]


@dataclass(eq=False)
class IndependentModel:
    """One single-foreground-topic model per class (independent-learning mode)."""

    class_models: list[Model]


# ---------------------------------------------------------------------------
# updates


def init_state(corpus: Corpus, hyper: HyperParams, seed: int, jitter: float = 0.05):
    """Seeded initialization: jittered pi, near-uniform admissible
    responsibilities, spatial posteriors at the prior.

    Each document draws from its own child of the seed, so later
    per-document processing order cannot affect results.
    """
    if corpus.vocab_size != hyper.vocab_size:
        raise InferenceError(
            f"corpus vocabulary {corpus.vocab_size} != model vocabulary {hyper.vocab_size}"
        )
    children = np.random.SeedSequence(seed).spawn(len(corpus) + 1)
    pi_rng = np.random.default_rng(children[-1])
    pi = hyper.pi0 + INIT_PI_JITTER * pi_rng.random(hyper.pi0.shape)
    states = [
        _init_document_state(doc, hyper, np.random.default_rng(children[j]), jitter)
        for j, doc in enumerate(corpus)
    ]
    return GlobalState(pi), states


def _init_document_state(doc: Document, hyper: HyperParams, rng, jitter: float) -> ImageState:
    alpha = encode_alpha(doc.labels, hyper)
    adm = alpha > 0
    raw = adm * (1.0 + jitter * rng.random((len(doc), hyper.k)))
    resp = raw / raw.sum(axis=1, keepdims=True)
    theta = alpha + resp.sum(axis=0)
    return ImageState(alpha, adm, theta, resp, [hyper.nw0] * hyper.k_fg)


def update_theta(state: ImageState) -> np.ndarray:
    """theta_k = alpha_k + sum_i resp_ik."""
    return state.alpha + state.resp.sum(axis=0)


def _resp_from_elog_word(doc: Document, elog_word: np.ndarray, state: ImageState,
                         hyper: HyperParams) -> np.ndarray:
    """Responsibility update given the gathered appearance message.

    ``elog_word`` is (K, N): psi(pi[k, x_i]) - psi(sum_v pi[k, v]).
    """
    k_fg = hyper.k_fg
    adm = state.admissible
    scores = np.full((len(doc), hyper.k), -np.inf)
    dig_theta = digamma(state.theta[adm])
    scores[:, adm] = elog_word[adm].T + dig_theta[None, :]

    log_uniform = -math.log(doc.area)
    if hyper.spatial_enabled:
        for k in range(k_fg):
            if adm[k]:
                scores[:, k] += _st_logpdf(doc.xy, state.nw[k])
        scores[:, k_fg:] += log_uniform
    else:
        scores[:, adm] += log_uniform

    m = scores.max(axis=1)
    with np.errstate(invalid="ignore"):
        shifted = np.exp(scores - m[:, None])
    shifted[:, ~adm] = 0.0
    totals = shifted.sum(axis=1)
    if not np.all(np.isfinite(totals)) or np.any(totals <= 0):
        raise InferenceError("responsibility underflow: zero or non-finite score row")
    return shifted / totals[:, None]


def update_responsibilities(doc: Document, global_state: GlobalState, state: ImageState,
                            hyper: HyperParams) -> np.ndarray:
    """One responsibility sweep for a document against the current appearance."""
    pi = global_state.pi
    elog = digamma(pi[:, doc.words]) - digamma(pi.sum(axis=1))[:, None]
    return _resp_from_elog_word(doc, elog, state, hyper)


def update_nw(doc: Document, resp_k: np.ndarray, nw0: NormalWishart) -> NormalWishart:
    """Conjugate Normal-Wishart refit from responsibility-weighted moments."""
    if not np.all(np.isfinite(doc.xy)):
        raise InferenceError(f"document {doc.id!r} has non-finite locations")
    r = np.asarray(resp_k, dtype=np.float64)
    n_k = r.sum()
    if n_k < NW_COUNT_FLOOR:
        return nw0
    xy = doc.xy
    xbar = r @ xy / n_k
    d = xy - xbar
    scatter = (r[:, None] * d).T @ d
    beta = nw0.beta + n_k
    v = nw0.v + n_k
    mu = (nw0.beta * nw0.mu + n_k * xbar) / beta
    dm = xbar - nw0.mu
    w_inv = _inv2(nw0.w) + scatter + (nw0.beta * n_k / beta) * np.outer(dm, dm)
    w = _inv2(w_inv)
    return NormalWishart(mu=mu, w=0.5 * (w + w.T), beta=float(beta), v=float(v))


def _update_document(doc: Document, elog_word: np.ndarray, state: ImageState,
                     hyper: HyperParams) -> ImageState:
    """resp -> theta -> spatial posterior, the per-document part of a sweep."""
    resp = _resp_from_elog_word(doc, elog_word, state, hyper)
    state.resp = resp
    state.theta = update_theta(state)
    state.nw = [
        update_nw(doc, resp[:, k], hyper.nw0) if state.admissible[k] else hyper.nw0
        for k in range(hyper.k_fg)
    ]
    return state


def update_appearance(corpus: Corpus, states: list[ImageState], hyper: HyperParams) -> GlobalState:
    """pi = pi0 + responsibility-weighted word counts, reduced in id order."""
    pi = hyper.pi0.copy()
    pi_t = pi.T  # (vocab, K) view for scatter-adds
    order = sorted(range(len(corpus.documents)), key=lambda j: corpus.documents[j].id)
    for j in order:
        np.add.at(pi_t, corpus.documents[j].words, states[j].resp)
    return GlobalState(pi)


# ---------------------------------------------------------------------------
# evidence lower bound


def _log_dirichlet_const(a: np.ndarray) -> float:
    return float(gammaln(a.sum()) - gammaln(a).sum())


def _elog_det_lambda(nw: NormalWishart) -> float:
    return digamma(nw.v / 2.0) + digamma((nw.v - 1.0) / 2.0) + 2.0 * math.log(2.0) + _logdet2(nw.w)


def _log_wishart_const(w: np.ndarray, v: float) -> float:
    return float(
        -0.5 * v * _logdet2(w)
        - v * math.log(2.0)
        - 0.5 * math.log(math.pi)
        - gammaln(0.5 * v)
        - gammaln(0.5 * (v - 1.0))
    )


def _nw_prior_minus_entropy(q: NormalWishart, p: NormalWishart) -> float:
    """E_q[log NW(mu, Lambda | prior)] - E_q[log q(mu, Lambda)]."""
    elogdet = _elog_det_lambda(q)
    dm = q.mu - p.mu
    quad = 2.0 / q.beta + q.v * float(dm @ q.w @ dm)
    e_p_normal = 0.5 * (2.0 * math.log(p.beta / (2.0 * math.pi)) + elogdet - p.beta * quad)
    e_p_wishart = (
        _log_wishart_const(p.w, p.v)
        + 0.5 * (p.v - 3.0) * elogdet
        - 0.5 * q.v * float(np.trace(_inv2(p.w) @ q.w))
    )
    e_q_normal = 0.5 * (2.0 * math.log(q.beta / (2.0 * math.pi)) + elogdet - 2.0)
    e_q_wishart = _log_wishart_const(q.w, q.v) + 0.5 * (q.v - 3.0) * elogdet - q.v
    return e_p_normal + e_p_wishart - e_q_normal - e_q_wishart


def _gaussian_expected_loglik(xy: np.ndarray, nw: NormalWishart) -> np.ndarray:
    """E_q[log N(l | mu, Lambda^-1)] per row of xy."""
    d = xy - nw.mu
    quad = (
        nw.w[0, 0] * d[:, 0] ** 2
        + (nw.w[0, 1] + nw.w[1, 0]) * d[:, 0] * d[:, 1]
        + nw.w[1, 1] * d[:, 1] ** 2
    )
    return 0.5 * _elog_det_lambda(nw) - LOG_2PI - 0.5 * (2.0 / nw.beta + nw.v * quad)


def _document_elbo(doc: Document, state: ImageState, elog_pi: np.ndarray,
                   hyper: HyperParams) -> float:
    adm = state.admissible
    alpha_a = state.alpha[adm]
    theta_a = state.theta[adm]
    elog_theta_a = digamma(theta_a) - digamma(theta_a.sum())
    total = (
        _log_dirichlet_const(alpha_a)
        - _log_dirichlet_const(theta_a)
        + float((alpha_a - theta_a) @ elog_theta_a)
    )

    if hyper.spatial_enabled:
        for k in range(hyper.k_fg):
            if adm[k]:
                total += _nw_prior_minus_entropy(state.nw[k], hyper.nw0)

    resp = state.resp
    resp_a = resp[:, adm]
    total += float((resp_a * elog_pi[adm, :][:, doc.words].T).sum())
    total += float(resp_a @ elog_theta_a).sum() if False else float((resp_a * elog_theta_a[None, :]).sum())

    log_uniform = -math.log(doc.area)
    if hyper.spatial_enabled:
        for k in range(hyper.k_fg):
            if adm[k]:
                total += float(resp[:, k] @ _gaussian_expected_loglik(doc.xy, state.nw[k]))
        total += float(resp[:, hyper.k_fg:].sum()) * log_uniform
    else:
        total += float(resp_a.sum()) * log_uniform

    pos = resp_a[resp_a > 0]
    total -= float((pos * np.log(pos)).sum())
    return total


def elbo_components(corpus: Corpus, global_state: GlobalState, states: list[ImageState],
                    hyper: HyperParams):
    """(appearance term, per-document terms); their sum is the ELBO."""
    pi, pi0 = global_state.pi, hyper.pi0
    elog_pi = digamma(pi) - digamma(pi.sum(axis=1))[:, None]
    appearance = 0.0
    for k in range(hyper.k):
        appearance += (
            _log_dirichlet_const(pi0[k])
            - _log_dirichlet_const(pi[k])
            + float((pi0[k] - pi[k]) @ elog_pi[k])
        )
    doc_terms = [
        _document_elbo(doc, state, elog_pi, hyper) for doc, state in zip(corpus, states)
    ]
    return appearance, doc_terms


def compute_elbo(corpus: Corpus, global_state: GlobalState, states: list[ImageState],
                 hyper: HyperParams) -> float:
    appearance, doc_terms = elbo_components(corpus, global_state, states, hyper)
    value = appearance + math.fsum(doc_terms)
    if not math.isfinite(value):
        raise InferenceError("non-finite ELBO: corrupted variational state")
    return value


# ---------------------------------------------------------------------------
# training


def _sweep_serial(corpus, states, elog_pi, hyper):
    for doc, state in zip(corpus, states):
        _update_document(doc, elog_pi[:, doc.words], state, hyper)


class _PoolContext:
    corpus: Corpus = None
    hyper: HyperParams = None


def _pool_init(corpus, hyper):
    _PoolContext.corpus = corpus
    _PoolContext.hyper = hyper


def _pool_chunk(args):
    indices, states, dig_pi, dig_rows = args
    corpus, hyper = _PoolContext.corpus, _PoolContext.hyper
    out = []
    for j, state in zip(indices, states):
        doc = corpus.documents[j]
        elog = dig_pi[:, doc.words] - dig_rows[:, None]
        out.append(_update_document(doc, elog, state, hyper))
    return indices, out


def _sweep_parallel(pool, n_chunks, corpus, states, dig_pi, dig_rows):
    n = len(corpus.documents)
    bounds = np.linspace(0, n, n_chunks + 1).astype(int)
    tasks = [
        (list(range(a, b)), states[a:b], dig_pi, dig_rows)
        for a, b in zip(bounds[:-1], bounds[1:])
        if b > a
    ]
    for indices, updated in pool.imap(_pool_chunk, tasks):
        for j, state in zip(indices, updated):
            states[j] = state


def fit_with_states(corpus: Corpus, hyper: HyperParams, seed: int, workers: int = 0,
                    jitter: float = 0.05, progress=None):
    """Run training and also return the final per-document states.

    ``workers >= 2`` runs per-document updates on a process pool; outputs
    are bit-identical to the serial run because per-document work is
    independent and the appearance reduction is order-fixed.
    """
    if len(corpus) == 0:
        raise InferenceError("cannot fit an empty corpus")
    global_state, states = init_state(corpus, hyper, seed, jitter=jitter)
    trace = [compute_elbo(corpus, global_state, states, hyper)]

    pool = None
    try:
        if workers and workers >= 2:
            import multiprocessing

            ctx = multiprocessing.get_context("fork")
            pool = ctx.Pool(workers, initializer=_pool_init, initargs=(corpus, hyper))

        for it in range(hyper.iterations):
            dig_pi = digamma(global_state.pi)
            dig_rows = digamma(global_state.pi.sum(axis=1))
            if pool is None:
                elog_pi = dig_pi - dig_rows[:, None]
                _sweep_serial(corpus, states, elog_pi, hyper)
            else:
                _sweep_parallel(pool, 2 * workers, corpus, states, dig_pi, dig_rows)
            global_state = update_appearance(corpus, states, hyper)
            elbo = compute_elbo(corpus, global_state, states, hyper)
            trace.append(elbo)
            if progress is not None:
                progress(it, elbo)
            if hyper.elbo_tol > 0:
                prev = trace[-2]
                if abs(elbo - prev) < hyper.elbo_tol * max(1.0, abs(prev)):
                    break
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    return Model(hyper, global_state, trace), states


def fit(corpus: Corpus, hyper: HyperParams, seed: int, workers: int = 0,
        progress=None) -> Model:
    model, _ = fit_with_states(corpus, hyper, seed, workers=workers, progress=progress)
    return model


def infer_heldout(model: Model, corpus: Corpus, seed: int, max_sweeps: int = 100,
                  tol: float = 1e-6, init_states: list[ImageState] | None = None,
                  jitter: float = 0.05) -> list[ImageState]:
    """Per-document inference with the appearance posterior frozen.

    Spatial posteriors start from the prior (fresh documents carry no
    trained spatial state).  Documents are independent; each iterates
    until its responsibilities move less than ``tol`` (max abs change)
    or ``max_sweeps`` is hit.
    """
    hyper = model.hyper
    if corpus.vocab_size != hyper.vocab_size:
        raise InferenceError(
            f"corpus vocabulary {corpus.vocab_size} != model vocabulary {hyper.vocab_size}"
        )
    pi = model.global_state.pi
    dig_pi = digamma(pi)
    dig_rows = digamma(pi.sum(axis=1))

    if init_states is None:
        children = np.random.SeedSequence(seed).spawn(len(corpus) + 1)
        states = [
            _init_document_state(doc, hyper, np.random.default_rng(children[j]), jitter)
            for j, doc in enumerate(corpus)
        ]
    else:
        states = init_states

    for doc, state in zip(corpus, states):
        elog = dig_pi[:, doc.words] - dig_rows[:, None]
        for _ in range(max_sweeps):
            previous = state.resp
            _update_document(doc, elog, state, hyper)
            if len(doc) == 0 or float(np.abs(state.resp - previous).max()) < tol:
                break
    return states


# ---------------------------------------------------------------------------
# serialization

MODEL_FORMAT = "topicloc-model"
MODEL_VERSION = 1


def _hyper_to_dict(hyper: HyperParams) -> dict:
    return {
        "num_classes": hyper.num_classes,
        "k_bg": hyper.k_bg,
        "pi0": hyper.pi0.tolist(),
        "nw0": {
            "mu": hyper.nw0.mu.tolist(),
            "w": hyper.nw0.w.tolist(),
            "beta": hyper.nw0.beta,
            "v": hyper.nw0.v,
        },
        "alpha_fg_present": hyper.alpha_fg_present,
        "alpha_bg": hyper.alpha_bg,
        "alpha_ssl": hyper.alpha_ssl,
        "iterations": hyper.iterations,
        "spatial_enabled": hyper.spatial_enabled,
        "appearance_prior_enabled": hyper.appearance_prior_enabled,
        "prior_scale": hyper.prior_scale,
        "elbo_tol": hyper.elbo_tol,
    }


def _hyper_from_dict(d: dict) -> HyperParams:
    nw = d["nw0"]
    return HyperParams(
        num_classes=d["num_classes"],
        k_bg=d["k_bg"],
        pi0=np.array(d["pi0"], dtype=np.float64),
        nw0=NormalWishart(
            mu=np.array(nw["mu"]), w=np.array(nw["w"]), beta=nw["beta"], v=nw["v"]
        ),
        alpha_fg_present=d["alpha_fg_present"],
        alpha_bg=d["alpha_bg"],
        alpha_ssl=d["alpha_ssl"],
        iterations=d["iterations"],
        spatial_enabled=d["spatial_enabled"],
        appearance_prior_enabled=d["appearance_prior_enabled"],
        prior_scale=d["prior_scale"],
        elbo_tol=d["elbo_tol"],
    )


def _model_to_dict(model: Model) -> dict:
    return {
        "hyper": _hyper_to_dict(model.hyper),
        "pi": model.global_state.pi.tolist(),
        "elbo_trace": list(model.elbo_trace),
    }


def _model_from_dict(d: dict) -> Model:
    return Model(
        hyper=_hyper_from_dict(d["hyper"]),
        global_state=GlobalState(np.array(d["pi"], dtype=np.float64)),
        elbo_trace=[float(x) for x in d["elbo_trace"]],
    )


def save_model(path, model: Model | IndependentModel) -> None:
    """Write a version-tagged JSON model file (atomically; byte-stable)."""
    if isinstance(model, IndependentModel):
        payload = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": "independent",
            "models": [_model_to_dict(m) for m in model.class_models],
        }
    else:
        payload = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": "joint",
            **_model_to_dict(model),
        }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    atomic_write_bytes(path, text.encode("utf-8") + b"\n")


def load_model(path) -> Model | IndependentModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != MODEL_FORMAT:
        raise InferenceError(f"{path}: not a {MODEL_FORMAT} file")
    if payload.get("version") != MODEL_VERSION:
        raise InferenceError(f"{path}: unsupported model version {payload.get('version')}")
    if payload.get("kind") == "independent":
        return IndependentModel([_model_from_dict(d) for d in payload["models"]])
    return _model_from_dict(payload)
