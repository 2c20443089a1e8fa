"""Loss terms: classification, domain, conditional entropy, VAT, VMT, DIRT-T.

All KL terms put the constant distribution first: KL(y_mix || f(x_mix)) for
virtual mixup, KL(f(x) || f(x + r)) for VAT and KL(teacher || student) for
refinement. Virtual labels are detached from the tape unless
``LossConfig.virtual_label_grad`` is set.
"""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .nn import Classifier

logger = logging.getLogger(__name__)

SITES = ("logits", "probabilities", "intermediate")
SITE_ALIASES = {"logits": "logits", "prob": "probabilities", "probs": "probabilities",
                "probabilities": "probabilities", "inter": "intermediate", "intermediate": "intermediate"}
ROW_SUM_TOL = 1e-9
_vanish_warned = False


class LossError(ValueError):
    pass


class NonFiniteLoss(ArithmeticError):
    """A named loss term (or the forward pass feeding it) went non-finite."""

    def __init__(self, component: str, detail: str):
        self.component = component
        super().__init__(f"{component}: {detail}")


@contextmanager
def _term(name: str):
    try:
        yield
    except ad.NumericOverflowError as exc:
        raise NonFiniteLoss(name, str(exc)) from exc


@dataclass(frozen=True)
class LossTermMask:
    """Which regularizers are on. L_y and L_d are never masked."""

    use_Lc: bool = True
    use_Lv: bool = True
    use_Lm: bool = True
    mixup_site: str = "logits"

    def __post_init__(self):
        site = SITE_ALIASES.get(self.mixup_site)
        if site is None:
            raise LossError(f"unknown mixup site {self.mixup_site!r}; expected one of {SITES}")
        object.__setattr__(self, "mixup_site", site)

    @classmethod
    def parse(cls, terms: str, site: str = "logits") -> "LossTermMask":
        """``"Lc,Lv,Lm"`` -> mask; an empty string disables every regularizer."""
        names = {t.strip().replace("_", "") for t in terms.split(",") if t.strip()}
        unknown = names - {"Lc", "Lv", "Lm"}
        if unknown:
            raise LossError(f"unknown loss terms {sorted(unknown)}; accepted: Lc, Lv, Lm")
        return cls("Lc" in names, "Lv" in names, "Lm" in names, site)

    @property
    def terms(self) -> str:
        return ",".join(t for t, on in (("Lc", self.use_Lc), ("Lv", self.use_Lv), ("Lm", self.use_Lm)) if on)

    @property
    def label(self) -> str:
        return "{" + ",".join(f"L_{t[1]}" for t in self.terms.split(",") if t) + "}"


TABLE4_ROWS = (
    LossTermMask(True, False, False),
    LossTermMask(True, True, False),
    LossTermMask(True, False, True),
    LossTermMask(True, True, True),
)


@dataclass(frozen=True)
class LossConfig:
    lambda_d: float = 0.01
    lambda_s: float = 1.0
    lambda_t: float = 0.1
    beta: float = 1.0  # teacher anchor for refinement; weaker values let target-only mixup drift
    alpha: float = 1.0
    epsilon: float = 0.1
    xi: float | None = None  # None -> 1e-6 * sqrt(input dim)
    power_iters: int = 1
    per_sample_lambda: bool = False
    virtual_label_grad: bool = False

    def validate(self) -> None:
        for name in ("lambda_d", "lambda_s", "lambda_t", "beta"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.alpha <= 0:
            raise LossError(f"alpha must be > 0, got {self.alpha}")
        if self.epsilon < 0:
            raise LossError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.xi is not None and self.xi <= 0:
            raise LossError(f"xi must be > 0, got {self.xi}")
        if self.power_iters < 1:
            raise LossError(f"power_iters must be >= 1, got {self.power_iters}")

    def xi_for(self, input_dim: int) -> float:
        return self.xi if self.xi is not None else 1e-6 * np.sqrt(input_dim)


def _rows_sum_to_one(kind: str, t) -> None:
    data = t.data if isinstance(t, ad.Tensor) else np.asarray(t)
    sums = data.sum(axis=1)
    bad = np.abs(sums - 1.0) > ROW_SUM_TOL
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise LossError(f"{kind}: row {i} sums to {sums[i]!r}, expected 1 within {ROW_SUM_TOL}")


def kl_divergence(p, q):
    """Mean over rows of KL(p_row || q_row)."""
    ps, qs = np.shape(p.data if isinstance(p, ad.Tensor) else p), np.shape(q.data if isinstance(q, ad.Tensor) else q)
    if ps != qs:
        raise LossError(f"kl_divergence: shape mismatch {ps} vs {qs}")
    _rows_sum_to_one("kl_divergence(p)", p)
    _rows_sum_to_one("kl_divergence(q)", q)
    return ad.mean(ad.kl_rows(p, q))


def classification_loss(probs, labels):
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != probs.shape:
        raise LossError(f"classification_loss: labels {labels.shape} vs probs {probs.shape}")
    if not (np.isin(labels, (0.0, 1.0)).all() and (labels.sum(axis=1) == 1.0).all()):
        raise LossError("classification_loss: labels must be one-hot rows")
    # with one-hot y, KL(y || p) = -y . ln p exactly (y ln y terms are 0)
    return ad.mean(ad.kl_rows(labels, probs))


def domain_losses(d_src, d_tgt):
    """(discriminator loss, non-saturating encoder loss)."""
    for name, t in (("d_src", d_src), ("d_tgt", d_tgt)):
        data = t.data if isinstance(t, ad.Tensor) else np.asarray(t)
        if (data <= 0).any() or (data >= 1).any():
            raise LossError(f"domain_losses: {name} must lie strictly inside (0, 1)")
    one_minus_tgt = ad.add(ad.neg(d_tgt), 1.0)
    disc = ad.sub(ad.neg(ad.mean(ad.log(d_src))), ad.mean(ad.log(one_minus_tgt)))
    gen = ad.neg(ad.mean(ad.log(d_tgt)))
    return disc, gen


def conditional_entropy(probs):
    _rows_sum_to_one("conditional_entropy", probs)
    return ad.mean(ad.entropy_rows(probs))


# ---------------------------------------------------------------------------
# VAT
# ---------------------------------------------------------------------------

def _array(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, ad.Tensor) else v, dtype=np.float64)


def detached(model: Classifier) -> Classifier:
    weights = {k: (v.data if isinstance(v, ad.Tensor) else v) for k, v in model.weights.items()}
    return Classifier(model.arch, weights)


def _unit_rows(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt((v * v).sum(axis=1))
    out = np.zeros_like(v)
    ok = norms >= 1e-12
    out[ok] = v[ok] / norms[ok, None]
    return out, ok


def vat_perturbation(model: Classifier, x, epsilon: float, xi: float, power_iters: int,
                     rng: np.random.Generator, clean_probs=None) -> np.ndarray:
    """Per-sample adversarial perturbation with ||r||_2 = epsilon."""
    x = _array(x)
    frozen = detached(model)
    clean = frozen(x).probs.data if clean_probs is None else _array(clean_probs)
    start, _ = _unit_rows(rng.normal(size=x.shape))
    u = start.copy()
    for _ in range(power_iters):
        tape = ad.Tape()
        r = tape.variable(xi * u)
        q = frozen(ad.add(x, r)).probs
        # per-row sum so each row's gradient is independent of batch size
        div = ad.sum(ad.kl_rows(clean, q))
        g = ad.grad(tape, div, r)
        u_new, ok = _unit_rows(g)
        if not ok.all():
            # dead-ReLU regions hit this every step; warn once, then log at debug level
            global _vanish_warned
            level = logging.DEBUG if _vanish_warned else logging.WARNING
            _vanish_warned = True
            logger.log(level, "VAT: %d of %d samples had a vanishing power-iteration gradient; "
                       "using their random start direction", int((~ok).sum()), len(ok))
            u_new[~ok] = start[~ok]
        u = u_new
    return epsilon * u


def _segment_means(kind: str, p, q, sizes: list[int]) -> list[ad.Tensor]:
    """KL(p || q) row-wise, averaged separately over consecutive row segments."""
    _rows_sum_to_one(f"{kind}(p)", p)
    _rows_sum_to_one(f"{kind}(q)", q)
    rows = ad.kl_rows(p, q)
    if len(sizes) == 1:
        return [ad.mean(rows)]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [ad.mean(ad.slice_rows(rows, a, b)) for a, b in zip(bounds[:-1], bounds[1:])]


def _cat(parts):
    if len(parts) == 1:
        return parts[0]
    if any(isinstance(p, ad.Tensor) and p.tracked for p in parts):
        return ad.concat(parts)
    return np.concatenate([_array(p) for p in parts], axis=0)


def _frozen(frozen: dict | None, key: str, value: np.ndarray) -> np.ndarray:
    """Reuse a recorded constant when ``frozen`` holds one, else record it."""
    if frozen is None:
        return value
    return frozen.setdefault(key, value)


def vat_segments(model: Classifier, xs: list, cleans: list, epsilon: float, xi: float, power_iters: int,
                 rng: np.random.Generator, frozen: dict | None = None) -> list[ad.Tensor]:
    """VAT losses for several batches sharing one power iteration and forward."""
    x = _cat([_array(v) for v in xs])
    clean = _frozen(frozen, "vat/clean", _cat([_array(c) for c in cleans]))
    if epsilon == 0:
        r = np.zeros_like(x)
    else:
        r = vat_perturbation(model, x, epsilon, xi, power_iters, rng, clean)
    r = _frozen(frozen, "vat/r", r)
    return _segment_means("vat_loss", clean, model(x + r).probs, [len(v) for v in xs])


def vat_loss(model: Classifier, x, epsilon: float, xi: float, power_iters: int,
             rng: np.random.Generator, clean_probs=None):
    """Mean KL(f(x) || f(x + r_adv)); the clean prediction is a constant."""
    x = _array(x)
    clean = detached(model)(x).probs.data if clean_probs is None else _array(clean_probs)
    return vat_segments(model, [x], [clean], epsilon, xi, power_iters, rng)[0]


# ---------------------------------------------------------------------------
# virtual mixup
# ---------------------------------------------------------------------------

class MixupDraw(NamedTuple):
    lam: float | np.ndarray
    perm: np.ndarray


def draw_mixup(n: int, alpha: float, rng: np.random.Generator, per_sample: bool = False) -> MixupDraw:
    if n < 2:
        raise LossError(f"mixup needs a batch of at least 2, got {n}")
    if alpha <= 0:
        raise LossError(f"alpha must be > 0, got {alpha}")
    lam = rng.beta(alpha, alpha, size=n) if per_sample else float(rng.beta(alpha, alpha))
    return MixupDraw(lam, rng.permutation(n))


def mix(a, draw: MixupDraw):
    """lam * a + (1 - lam) * a[perm]; keeps tape tracking if ``a`` is tracked."""
    lam, perm = draw
    if isinstance(a, ad.Tensor) and a.tracked:
        partner = ad.rows(a, perm)
        if np.ndim(lam) == 0:
            return ad.add(ad.scale(a, lam), ad.scale(partner, 1.0 - lam))
        col = np.broadcast_to(np.asarray(lam)[:, None], a.shape)
        return ad.add(ad.mul(a, col), ad.mul(partner, 1.0 - col))
    arr = a.data if isinstance(a, ad.Tensor) else np.asarray(a, dtype=np.float64)
    if np.ndim(lam) == 0:
        return lam * arr + (1.0 - lam) * arr[perm]
    col = np.asarray(lam)[:, None]
    return col * arr + (1.0 - col) * arr[perm]


def mixup_batch(x, aux, alpha: float, rng: np.random.Generator, per_sample: bool = False,
                draw: MixupDraw | None = None):
    """Mix inputs and an aligned carrier (virtual labels) with one shared draw."""
    n = np.shape(x.data if isinstance(x, ad.Tensor) else x)[0]
    n_aux = np.shape(aux.data if isinstance(aux, ad.Tensor) else aux)[0]
    if n != n_aux:
        raise LossError(f"mixup_batch: x has {n} rows but aux has {n_aux}")
    if draw is None:
        draw = draw_mixup(n, alpha, rng, per_sample)
    elif n < 2:
        raise LossError(f"mixup needs a batch of at least 2, got {n}")
    return mix(x, draw), mix(aux, draw), draw


def vmt_segments(model: Classifier, segments: list, alpha: float, site: str, rng: np.random.Generator,
                 per_sample: bool = False, virtual_label_grad: bool = False,
                 draws: list | None = None, frozen: dict | None = None) -> list[ad.Tensor]:
    """Virtual-mixup losses for several batches sharing one forward at the mixed inputs.

    ``segments`` holds ``(x, fwd)`` pairs where ``fwd`` is the model's forward on
    ``x``. Each segment gets its own mixup draw; pairs never cross segments.
    ``frozen`` (a dict) pins the detached virtual labels across calls, which
    finite-difference checks need.
    """
    site = SITE_ALIASES.get(site, site)
    if site not in SITES:
        raise LossError(f"unknown mixup site {site!r}")
    source = model if virtual_label_grad else detached(model)
    x_mixed, y_mixed = [], []
    for k, (x, fwd) in enumerate(segments):
        draw = draws[k] if draws is not None else None
        carrier = {"logits": fwd.logits, "probabilities": fwd.probs, "intermediate": fwd.hidden[0]}[site]
        if not virtual_label_grad:
            carrier = ad.stop_gradient(carrier)
        x_mix, c_mix, _ = mixup_batch(_array(x), carrier, alpha, rng, per_sample, draw)
        if site == "logits":
            c_mix = ad.softmax(c_mix)
        elif site == "intermediate":
            c_mix = ad.softmax(source.logits_from_hidden(c_mix, 0))
        if not virtual_label_grad and frozen is not None:
            c_mix = ad.constant(_frozen(frozen, f"vmt/{k}", _array(c_mix)))
        x_mixed.append(x_mix)
        y_mixed.append(c_mix)
    pred = model(_cat(x_mixed)).probs
    return _segment_means("vmt_loss", _cat(y_mixed), pred, [len(x) for x in x_mixed])


def vmt_loss(model: Classifier, x, alpha: float, site: str, rng: np.random.Generator,
             fwd=None, per_sample: bool = False, virtual_label_grad: bool = False,
             draw: MixupDraw | None = None):
    """KL between the mixed virtual label and the prediction at the mixed input."""
    x = _array(x)
    if fwd is None:
        fwd = model(x)
    draws = None if draw is None else [draw]
    return vmt_segments(model, [(x, fwd)], alpha, site, rng, per_sample, virtual_label_grad, draws)[0]


# ---------------------------------------------------------------------------
# combined objectives
# ---------------------------------------------------------------------------

COMPONENTS = ("L_y", "L_d", "L_m_src", "L_v_src", "L_m_tgt", "L_v_tgt", "L_c_tgt")


def _slice_forward(fwd, start: int, stop: int, n: int):
    if start == 0 and stop == n:
        return fwd
    return type(fwd)(*(
        tuple(ad.slice_rows(h, start, stop) for h in part) if isinstance(part, tuple)
        else ad.slice_rows(part, start, stop)
        for part in fwd
    ))


def _regularizers(model, sides: list[tuple[str, np.ndarray, object]], cfg: LossConfig, mask: LossTermMask,
                  streams, frozen: dict | None = None) -> dict[str, ad.Tensor]:
    """L_m and L_v for each side (source/target), batched across sides."""
    out: dict[str, ad.Tensor] = {}
    if not sides:
        return out
    names = "/".join(side for side, _, _ in sides)
    if mask.use_Lm:
        with _term(f"L_m ({names})"):
            vals = vmt_segments(model, [(x, f) for _, x, f in sides], cfg.alpha, mask.mixup_site, streams["mixup"],
                                cfg.per_sample_lambda, cfg.virtual_label_grad, frozen=frozen)
        out.update({f"L_m_{side}": v for (side, _, _), v in zip(sides, vals)})
    if mask.use_Lv:
        xi = cfg.xi_for(model.arch.input_dim)
        with _term(f"L_v ({names})"):
            vals = vat_segments(model, [x for _, x, _ in sides], [f.probs.data for _, _, f in sides],
                                cfg.epsilon, xi, cfg.power_iters, streams["vat"], frozen)
        out.update({f"L_v_{side}": v for (side, _, _), v in zip(sides, vals)})
    return out


def _weighted(acc, weight: float, terms: list):
    if not terms:
        return acc
    part = terms[0]
    for t in terms[1:]:
        part = ad.add(part, t)
    part = ad.scale(part, weight)
    return part if acc is None else ad.add(acc, part)


def combined_objective(model: Classifier, batch_src, batch_tgt, cfg: LossConfig, mask: LossTermMask,
                       streams, frozen: dict | None = None) -> tuple[ad.Tensor, dict[str, float]]:
    """Joint VMT + VADA objective for the encoder/head update.

    ``batch_src`` is ``(x, onehot_labels)``; ``batch_tgt`` is target inputs.
    Terms with a zero weight or a disabled mask bit are skipped entirely and
    reported as 0.0. Source and target rows share forward passes. Pass the
    same ``frozen`` dict (and identically seeded streams) to repeated calls to
    hold virtual labels and VAT directions fixed.
    """
    cfg.validate()
    xs, ys = _array(batch_src[0]), batch_src[1]
    xt = _array(batch_tgt)
    if len(xs) == 0 or len(xt) == 0:
        raise LossError("combined_objective: empty batch")
    ns, nt = len(xs), len(xt)
    need_tgt = cfg.lambda_d > 0 or cfg.lambda_t > 0
    x_all = np.concatenate([xs, xt]) if need_tgt else xs
    with _term("forward"):
        f_all = model(x_all)
    n_all = len(x_all)
    fs = _slice_forward(f_all, 0, ns, n_all)
    ft = _slice_forward(f_all, ns, ns + nt, n_all) if need_tgt else None

    with _term("L_y"):
        terms: dict[str, ad.Tensor] = {"L_y": classification_loss(fs.probs, ys)}
    if cfg.lambda_d > 0:
        with _term("L_d"):
            terms["L_d"] = ad.neg(ad.mean(ad.log(model.discriminate(ft.features))))
    sides = []
    if cfg.lambda_s > 0:
        sides.append(("src", xs, fs))
    if cfg.lambda_t > 0:
        sides.append(("tgt", xt, ft))
    terms.update(_regularizers(model, sides, cfg, mask, streams, frozen))
    if cfg.lambda_t > 0 and mask.use_Lc:
        with _term("L_c_tgt"):
            terms["L_c_tgt"] = conditional_entropy(ft.probs)

    total = terms["L_y"]
    if "L_d" in terms:
        total = _weighted(total, cfg.lambda_d, [terms["L_d"]])
    total = _weighted(total, cfg.lambda_s, [terms[k] for k in ("L_m_src", "L_v_src") if k in terms])
    total = _weighted(total, cfg.lambda_t, [terms[k] for k in ("L_m_tgt", "L_v_tgt", "L_c_tgt") if k in terms])
    comps = dict.fromkeys(COMPONENTS, 0.0)
    comps.update({k: v.item() for k, v in terms.items()})
    comps["total"] = total.item()
    return total, comps


def weighted_total(comps: dict[str, float], cfg: LossConfig) -> float:
    """Recompute the objective from reported components (bookkeeping check)."""
    return (comps["L_y"] + cfg.lambda_d * comps["L_d"]
            + cfg.lambda_s * (comps["L_m_src"] + comps["L_v_src"])
            + cfg.lambda_t * (comps["L_m_tgt"] + comps["L_v_tgt"] + comps["L_c_tgt"]))


def dirt_t_objective(student: Classifier, teacher: Classifier, x_tgt, cfg: LossConfig, mask: LossTermMask,
                     streams, frozen: dict | None = None) -> tuple[ad.Tensor, dict[str, float]]:
    """lambda_t * (L_m + L_v + L_c) + beta * KL(teacher || student) on target data."""
    cfg.validate()
    if student.arch != teacher.arch:
        raise LossError(f"teacher/student architecture mismatch: {teacher.arch.to_dict()} vs {student.arch.to_dict()}")
    x_tgt = _array(x_tgt)
    with _term("forward"):
        ft = student(x_tgt)
    terms: dict[str, ad.Tensor] = {}
    if cfg.lambda_t > 0:
        terms.update(_regularizers(student, [("tgt", x_tgt, ft)], cfg, mask, streams, frozen))
        if mask.use_Lc:
            with _term("L_c_tgt"):
                terms["L_c_tgt"] = conditional_entropy(ft.probs)
    if cfg.beta > 0:
        with _term("KL_teacher"):
            terms["KL_teacher"] = kl_divergence(detached(teacher)(x_tgt).probs.data, ft.probs)
    total = _weighted(None, cfg.lambda_t, [terms[k] for k in ("L_m_tgt", "L_v_tgt", "L_c_tgt") if k in terms])
    if "KL_teacher" in terms:
        total = _weighted(total, cfg.beta, [terms["KL_teacher"]])
    if total is None:
        total = ad.scale(ad.sum(ft.probs), 0.0)
    comps = {"L_m_tgt": 0.0, "L_v_tgt": 0.0, "L_c_tgt": 0.0, "KL_teacher": 0.0}
    comps.update({k: v.item() for k, v in terms.items()})
    comps["total"] = total.item()
    return total, comps


def with_weights(cfg: LossConfig, **kw) -> LossConfig:
    return replace(cfg, **kw)
