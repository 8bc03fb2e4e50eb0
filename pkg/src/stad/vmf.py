"""Hyperspherical state-space mixture tracking drifting class prototypes.

Each class k owns a latent prototype direction on the unit sphere that
drifts over time steps through a vMF transition kernel; observed unit
embeddings at each step follow a vMF mixture around the current
prototypes. Inference is mean-field coordinate ascent over a sliding
window: per-sample assignment updates and per-class prototype-belief
updates alternate in fixed left-to-right sweeps, followed by closed-form
mixing-weight (and optionally concentration) re-estimates.

The newest prototype directions double as an adapted last-layer weight
matrix: predictions are a temperature-scaled softmax of their dot
products with the embeddings, with per-class normalizer and mixing-weight
bias terms when those are not shared/uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateMessageError,
    DimensionMismatchError,
    DomainError,
    EmptyBatchError,
    InsufficientHistoryError,
    NonContiguousTimeError,
    NotAdaptedError,
    ZeroVectorError,
)
from .mathcore import (
    bessel_ratio,
    estimate_kappa_clamped,
    log_sum_exp,
    log_vmf_norm_const,
    normalize_rows,
)

__all__ = [
    "VmfConfig",
    "PrototypeBelief",
    "VmfModel",
    "assignment_step",
    "prototype_update",
    "expected_prototype",
    "mixing_update",
    "kappa_update",
    "predict_probs",
]

_DEGENERATE_EPS = 1e-12


@dataclass
class VmfConfig:
    """Knobs for the spherical tracker.

    kappa_trans / kappa_ems may be scalars (shared across classes) or
    length-K sequences; per_class_kappa switches assignments and
    predictions to the bias-term form and makes learned concentrations
    class specific.
    """

    d: int
    k: int
    kappa_trans: float | tuple = 100.0
    kappa_ems: float | tuple = 100.0
    kappa0: float = 100.0
    window: int = 3
    e_sweeps: int = 2
    learn_kappa_trans: bool = False
    learn_kappa_ems: bool = False
    per_class_kappa: bool = False
    pi_floor: float = 1e-4

    def __post_init__(self):
        if self.d < 2:
            raise DomainError(f"d must be >= 2, got {self.d}")
        if self.k < 1:
            raise DomainError(f"k must be >= 1, got {self.k}")
        if self.window < 1:
            raise DomainError(f"window must be >= 1, got {self.window}")
        if self.e_sweeps < 1:
            raise DomainError(f"e_sweeps must be >= 1, got {self.e_sweeps}")
        if not 0.0 <= self.pi_floor < 1.0 / self.k:
            raise DomainError(
                f"pi_floor must lie in [0, 1/K), got {self.pi_floor}"
            )
        for name in ("kappa_trans", "kappa_ems", "kappa0"):
            vals = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(vals)) or np.any(vals < 0.0):
                raise DomainError(f"{name} must be finite and >= 0")


@dataclass
class PrototypeBelief:
    """Variational vMF belief over the K prototype directions.

    mean_dir rows are unit vectors, conc the matching concentrations, and
    expected caches A_D(conc) * mean_dir (norm < 1).
    """

    mean_dir: np.ndarray  # (K, D)
    conc: np.ndarray      # (K,)
    expected: np.ndarray  # (K, D)

    @classmethod
    def from_params(cls, mean_dir: np.ndarray, conc: np.ndarray) -> "PrototypeBelief":
        mean_dir = np.asarray(mean_dir, dtype=float)
        conc = np.asarray(conc, dtype=float)
        return cls(mean_dir, conc, expected_prototype(mean_dir, conc, mean_dir.shape[1]))

    def copy(self) -> "PrototypeBelief":
        return PrototypeBelief(self.mean_dir.copy(), self.conc.copy(), self.expected.copy())


@dataclass
class _WindowStep:
    t: int
    feats: np.ndarray   # (N, D), unit rows
    belief: PrototypeBelief
    resp: np.ndarray    # (N, K)
    mixing: np.ndarray  # (K,)


def expected_prototype(mean_dir: np.ndarray, conc, d: int) -> np.ndarray:
    """Expected prototype under a vMF belief: A_D(conc) * mean_dir."""
    mean_dir = np.asarray(mean_dir, dtype=float)
    ratio = bessel_ratio(d, conc)
    if mean_dir.ndim == 1:
        return float(ratio) * mean_dir
    return np.asarray(ratio)[:, None] * mean_dir


def assignment_step(
    feats: np.ndarray,
    expected: np.ndarray,
    mixing: np.ndarray,
    kappa_ems: np.ndarray,
    d: int,
    per_class: bool = False,
) -> np.ndarray:
    """Posterior class responsibilities for one batch.

    Log-domain: log pi_k [+ log C_D(kappa_k) under per-class
    concentrations] + kappa_k <expected_k, h>, normalized per row. With a
    shared concentration the normalizer term is identical across classes
    and is omitted, so it cancels exactly.
    """
    feats = np.asarray(feats, dtype=float)
    expected = np.asarray(expected, dtype=float)
    if feats.ndim != 2 or expected.ndim != 2 or feats.shape[1] != expected.shape[1]:
        raise DimensionMismatchError(
            f"feats {feats.shape} vs prototypes {expected.shape}"
        )
    if not np.all(np.isfinite(feats)):
        raise DomainError("embeddings contain non-finite entries")
    k = expected.shape[0]
    if k == 1:
        return np.ones((feats.shape[0], 1))
    kappa_ems = np.broadcast_to(np.asarray(kappa_ems, dtype=float), (k,))
    with np.errstate(divide="ignore"):
        logits = np.log(np.asarray(mixing, dtype=float)) + kappa_ems * (
            feats @ expected.T
        )
    if per_class:
        logits = logits + log_vmf_norm_const(d, kappa_ems)
    return np.exp(logits - log_sum_exp(logits, axis=1)[:, None])


def prototype_update(
    data_msg: np.ndarray,
    past_msg: np.ndarray | None = None,
    future_msg: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Belief update for a single prototype from already-scaled messages.

    Messages are natural-parameter vectors: the emission term
    kappa_ems * sum_n resp_n h_n plus, when present, the temporal
    neighbours' kappa * expected-direction vectors (or the initial prior's
    kappa0 * mu0). Returns (mean direction, concentration) of the summed
    message. Raises when the messages cancel to (near-)zero, in which case
    the caller keeps its previous belief.
    """
    total = np.asarray(data_msg, dtype=float).copy()
    for msg in (past_msg, future_msg):
        if msg is not None:
            total += np.asarray(msg, dtype=float)
    if not np.all(np.isfinite(total)):
        raise DomainError("prototype messages must be finite")
    norm = float(np.linalg.norm(total))
    if norm <= _DEGENERATE_EPS:
        raise DegenerateMessageError("prototype messages cancelled exactly")
    return total / norm, norm


def mixing_update(resp: np.ndarray, pi_floor: float = 0.0) -> np.ndarray:
    """Column means of the responsibilities, floored and renormalized.

    Entries below the floor are pinned to it and the remaining mass is
    distributed proportionally over the others, so e.g. rows all equal to
    (1, 0) with floor 0.01 give (0.99, 0.01).
    """
    resp = np.asarray(resp, dtype=float)
    if resp.ndim != 2 or resp.shape[0] == 0:
        raise EmptyBatchError("mixing update needs at least one sample")
    pi = resp.mean(axis=0)
    pi = pi / pi.sum()
    if pi_floor <= 0.0:
        return pi
    pinned = np.zeros(pi.shape[0], dtype=bool)
    for _ in range(pi.shape[0]):
        low = (pi < pi_floor) & ~pinned
        if not low.any():
            break
        pinned |= low
        rest = ~pinned
        pi[pinned] = pi_floor
        # the mean of simplex rows keeps max >= 1/K > floor, so rest is non-empty
        pi[rest] *= (1.0 - pi_floor * pinned.sum()) / pi[rest].sum()
    return pi


def kappa_update(
    beliefs: list[PrototypeBelief],
    resps: list[np.ndarray],
    feats: list[np.ndarray],
    d: int,
    learn_trans: bool,
    learn_ems: bool,
    per_class: bool = False,
) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Concentration re-estimates from window-wide resultant lengths.

    The transition resultant averages the dot products of consecutive
    expected prototypes over window transitions and classes; the emission
    resultant averages the responsibility-weighted alignments of
    embeddings with their expected prototypes over every window step (the
    emission term exists for all steps, so the sum is not restricted to
    steps with a predecessor). Estimates are clamped to [1e-6, 1e6].
    """
    kappa_trans = kappa_ems = None
    if learn_trans:
        if len(beliefs) < 2:
            raise InsufficientHistoryError(
                "transition concentration needs >= 2 window steps"
            )
        dots = np.stack(
            [
                np.sum(beliefs[i].expected * beliefs[i + 1].expected, axis=1)
                for i in range(len(beliefs) - 1)
            ]
        )  # (T-1, K)
        r = np.abs(dots.mean(axis=0)) if per_class else np.abs(dots.mean())
        kappa_trans = np.broadcast_to(
            np.atleast_1d(estimate_kappa_clamped(r, d)), (beliefs[0].mean_dir.shape[0],)
        ).copy()
    if learn_ems:
        align_sum = np.zeros(beliefs[0].mean_dir.shape[0])
        count_sum = np.zeros_like(align_sum)
        n_total = 0
        for belief, resp, h in zip(beliefs, resps, feats):
            align_sum += np.sum(resp * (h @ belief.expected.T), axis=0)
            count_sum += resp.sum(axis=0)
            n_total += h.shape[0]
        if per_class:
            r = np.abs(align_sum) / np.maximum(count_sum, 1e-300)
        else:
            r = np.abs(align_sum.sum()) / n_total
        kappa_ems = np.broadcast_to(
            np.atleast_1d(estimate_kappa_clamped(r, d)), align_sum.shape
        ).copy()
    return kappa_trans, kappa_ems


def predict_probs(
    feats: np.ndarray,
    prototypes: np.ndarray,
    kappa_ems: np.ndarray,
    mixing: np.ndarray,
    d: int,
    per_class: bool = False,
) -> np.ndarray:
    """Class probabilities from prototype directions.

    Shared concentration with uniform mixing reduces exactly to
    softmax(kappa_ems * W h); per-class concentrations or non-uniform
    mixing add the log-normalizer / log-mixing bias terms of the full
    cluster posterior.
    """
    feats = np.asarray(feats, dtype=float)
    prototypes = np.asarray(prototypes, dtype=float)
    k = prototypes.shape[0]
    if k == 1:
        return np.ones((feats.shape[0], 1))
    kappa_ems = np.broadcast_to(np.asarray(kappa_ems, dtype=float), (k,))
    mixing = np.asarray(mixing, dtype=float)
    logits = kappa_ems * (feats @ prototypes.T)
    if per_class:
        with np.errstate(divide="ignore"):
            logits = logits + log_vmf_norm_const(d, kappa_ems) + np.log(mixing)
    elif np.ptp(mixing) > 0.0:
        with np.errstate(divide="ignore"):
            logits = logits + np.log(mixing)
    return np.exp(logits - log_sum_exp(logits, axis=1)[:, None])


class VmfModel:
    """Sliding-window spherical tracker with an adapted softmax head.

    Single-writer: adapt/predict must be externally serialized per
    instance. With static=True the transition chain is dropped: every
    arrival is fit as a fresh mixture anchored only at the source
    prototypes (window forced to 1).
    """

    def __init__(self, source_weights: np.ndarray, config: VmfConfig, static: bool = False):
        source_weights = np.asarray(source_weights, dtype=float)
        if source_weights.ndim != 2:
            raise DimensionMismatchError(
                f"source weights must be (K, D), got {source_weights.shape}"
            )
        if source_weights.shape != (config.k, config.d):
            raise DimensionMismatchError(
                f"source weights {source_weights.shape} do not match "
                f"config (K={config.k}, D={config.d})"
            )
        if config.k < 2:
            raise DomainError("the tracker needs K >= 2 classes")
        self.config = config
        self.static = static
        self.source_prototypes = normalize_rows(source_weights)

        k = config.k
        self._kappa_trans = np.broadcast_to(
            np.atleast_1d(np.asarray(config.kappa_trans, dtype=float)), (k,)
        ).copy()
        self._kappa_ems = np.broadcast_to(
            np.atleast_1d(np.asarray(config.kappa_ems, dtype=float)), (k,)
        ).copy()
        self._kappa0 = np.full(k, float(config.kappa0))

        self._anchor = PrototypeBelief.from_params(
            self.source_prototypes.copy(), self._kappa0.copy()
        )
        self._anchor_is_prior = True
        self._steps: list[_WindowStep] = []
        self.degenerate_updates = 0

    # -- public views ----------------------------------------------------

    @property
    def prototypes(self) -> np.ndarray:
        """Current adapted weight rows (unit directions, newest step)."""
        if not self._steps:
            raise NotAdaptedError("no adaptation step has run yet")
        return self._steps[-1].belief.mean_dir

    @property
    def mixing(self) -> np.ndarray:
        if not self._steps:
            raise NotAdaptedError("no adaptation step has run yet")
        return self._steps[-1].mixing

    @property
    def kappa_trans(self) -> np.ndarray:
        return self._kappa_trans

    @property
    def kappa_ems(self) -> np.ndarray:
        return self._kappa_ems

    @property
    def window_times(self) -> list[int]:
        return [s.t for s in self._steps]

    # -- adaptation ------------------------------------------------------

    def adapt(self, t: int, feats: np.ndarray) -> "VmfModel":
        """Ingest the batch at time t and re-infer the window."""
        cfg = self.config
        feats = np.asarray(feats, dtype=float)
        if feats.ndim != 2 or feats.shape[1] != cfg.d:
            raise DimensionMismatchError(
                f"batch shape {feats.shape} does not match D={cfg.d}"
            )
        if feats.shape[0] == 0:
            raise EmptyBatchError("adaptation needs at least one sample")
        feats = normalize_rows(feats)
        if self._steps and t != self._steps[-1].t + 1:
            raise NonContiguousTimeError(
                f"expected t={self._steps[-1].t + 1}, got {t}"
            )

        if self.static:
            init = PrototypeBelief.from_params(
                self.source_prototypes.copy(), self._kappa0.copy()
            )
        elif self._steps:
            init = self._steps[-1].belief.copy()
        else:
            init = self._anchor.copy()
        step = _WindowStep(
            t=t,
            feats=feats,
            belief=init,
            resp=np.full((feats.shape[0], cfg.k), 1.0 / cfg.k),
            mixing=np.full(cfg.k, 1.0 / cfg.k),
        )
        self._steps.append(step)
        window = 1 if self.static else cfg.window
        while len(self._steps) > window:
            evicted = self._steps.pop(0)
            self._anchor = evicted.belief
            self._anchor_is_prior = False

        for _ in range(cfg.e_sweeps):
            self.coordinate_ascent_sweep()
        for s in self._steps:
            s.mixing = mixing_update(s.resp, cfg.pi_floor)
        if cfg.learn_kappa_ems or (cfg.learn_kappa_trans and len(self._steps) >= 2):
            new_trans, new_ems = kappa_update(
                [s.belief for s in self._steps],
                [s.resp for s in self._steps],
                [s.feats for s in self._steps],
                cfg.d,
                learn_trans=cfg.learn_kappa_trans and len(self._steps) >= 2,
                learn_ems=cfg.learn_kappa_ems,
                per_class=cfg.per_class_kappa,
            )
            if new_trans is not None:
                self._kappa_trans = new_trans
            if new_ems is not None:
                self._kappa_ems = new_ems
        return self

    def coordinate_ascent_sweep(self) -> None:
        """One left-to-right pass of assignment + prototype updates.

        Each update is the exact coordinate maximizer of the window
        objective given its neighbours, so repeated sweeps with fixed
        concentrations never decrease the evidence lower bound.
        """
        cfg = self.config
        steps = self._steps
        for i, step in enumerate(steps):
            step.resp = assignment_step(
                step.feats,
                step.belief.expected,
                step.mixing,
                self._kappa_ems,
                cfg.d,
                per_class=cfg.per_class_kappa,
            )
            data_msg = self._kappa_ems[:, None] * (step.resp.T @ step.feats)
            if self.static:
                total = self._kappa0[:, None] * self.source_prototypes + data_msg
            else:
                if i == 0:
                    total = self._anchor_message() + data_msg
                else:
                    total = (
                        self._kappa_trans[:, None] * steps[i - 1].belief.expected
                        + data_msg
                    )
                if i + 1 < len(steps):
                    total = total + (
                        self._kappa_trans[:, None] * steps[i + 1].belief.expected
                    )
            norms = np.linalg.norm(total, axis=1)
            ok = norms > _DEGENERATE_EPS
            safe = np.where(ok, norms, 1.0)
            new_dir = np.where(ok[:, None], total / safe[:, None], step.belief.mean_dir)
            new_conc = np.where(ok, norms, step.belief.conc)
            if not np.all(ok):
                self.degenerate_updates += int((~ok).sum())
            step.belief = PrototypeBelief.from_params(new_dir, new_conc)

    def _anchor_message(self) -> np.ndarray:
        """Natural-parameter message the left boundary receives.

        The initial prior contributes kappa0 * mu0 exactly; a frozen
        evicted belief contributes kappa_trans * (expected direction),
        i.e. it is treated as one more fixed vMF neighbour.
        """
        if self._anchor_is_prior:
            return self._anchor.conc[:, None] * self._anchor.mean_dir
        return self._kappa_trans[:, None] * self._anchor.expected

    # -- prediction and diagnostics ---------------------------------------

    def predict(self, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Class probabilities and argmax labels for a batch."""
        if not self._steps:
            raise NotAdaptedError("call adapt() before predict()")
        feats = normalize_rows(np.asarray(feats, dtype=float))
        if feats.shape[1] != self.config.d:
            raise DimensionMismatchError(
                f"batch dimension {feats.shape[1]} != D={self.config.d}"
            )
        newest = self._steps[-1]
        probs = predict_probs(
            feats,
            newest.belief.mean_dir,
            self._kappa_ems,
            newest.mixing,
            self.config.d,
            per_class=self.config.per_class_kappa,
        )
        return probs, probs.argmax(axis=1)

    def window_elbo(self) -> float:
        """Evidence lower bound of the current window state.

        Expected complete-data log density (anchor prior, emissions,
        within-window transitions) plus the entropies of the vMF beliefs
        and the categorical assignments.
        """
        if not self._steps:
            raise NotAdaptedError("no adaptation step has run yet")
        cfg = self.config
        d = cfg.d
        total = 0.0
        steps = self._steps

        if self.static:
            prior_scale = self._kappa0
            prior_msg = self._kappa0[:, None] * self.source_prototypes
            for s in steps:
                total += float(np.sum(log_vmf_norm_const(d, prior_scale)))
                total += float(np.sum(prior_msg * s.belief.expected))
        else:
            prior_scale = (
                self._anchor.conc if self._anchor_is_prior else self._kappa_trans
            )
            total += float(np.sum(log_vmf_norm_const(d, prior_scale)))
            total += float(np.sum(self._anchor_message() * steps[0].belief.expected))
            for prev, cur in zip(steps, steps[1:]):
                total += float(np.sum(log_vmf_norm_const(d, self._kappa_trans)))
                total += float(
                    np.sum(
                        self._kappa_trans
                        * np.sum(prev.belief.expected * cur.belief.expected, axis=1)
                    )
                )

        for s in steps:
            align = s.feats @ s.belief.expected.T  # (N, K)
            with np.errstate(divide="ignore"):
                log_pi = np.log(s.mixing)
            per_class_ll = (
                log_pi + log_vmf_norm_const(d, self._kappa_ems) + self._kappa_ems * align
            )
            total += float(np.sum(s.resp * per_class_ll))
            # categorical entropy, 0 log 0 := 0
            with np.errstate(divide="ignore", invalid="ignore"):
                ent = -np.where(s.resp > 0.0, s.resp * np.log(s.resp), 0.0)
            total += float(np.sum(ent))
            # vMF belief entropy: -log C_D(gamma) - gamma A_D(gamma)
            gamma = s.belief.conc
            total += float(
                np.sum(-log_vmf_norm_const(d, gamma) - gamma * bessel_ratio(d, gamma))
            )
        return total
