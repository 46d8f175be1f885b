"""Adversarial adaptation framework: encoder E, generator G, discriminator D
and pixel-wise classifier S, trained with alternating updates.

Each training iteration draws one source and one target sample and runs

1. a discriminator step on ``BCE(D(G(E(src))), 0) + BCE(D(G(E(tgt))), 1)``,
2. a generator step on the flipped adversarial loss plus L1 reconstruction,
3. an encoder/classifier step on the flipped adversarial loss plus the
   segmentation loss of the source sample.

Domain labels are source = 0 and target = 1.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from conslab.errors import DataError, NumericError, StructuralError
from conslab.losses import LossSpec, ProbPolicy, pixelwise_loss
from conslab.metrics import Confusion
from conslab.nn import Conv3x3, Dense, GaussianNoise, Network, ReLU, Sigmoid, SoftmaxPerPixel, Tanh, adam_step
from conslab.synth import Sample

SOURCE_LABEL = 0.0
TARGET_LABEL = 1.0
COLD_CLAMP = (-10.0, 10.0)
VARIANTS = ("seg_only", "seg_plus_gan")
HISTORY_HEADER = [
    "step",
    "l_gan_d",
    "l_gan_g",
    "l_gan_e",
    "l_rec",
    "l_seg_s",
    "source_miou",
    "target_miou",
    "active_loss",
]


@dataclass
class ModelConfig:
    C: int = 3
    K: int = 4
    enc_widths: Tuple[int, int] = (16, 16)
    gen_width: int = 16
    disc_width: int = 16
    gen_noise_std: float = 0.1

    def __post_init__(self):
        self.enc_widths = tuple(int(w) for w in self.enc_widths)
        if len(self.enc_widths) != 2 or min(self.enc_widths) < 1:
            raise StructuralError("enc_widths must be two positive widths")
        if self.C < 1 or self.K < 1 or self.gen_width < 1 or self.disc_width < 1:
            raise StructuralError("model sizes must be positive")

    @property
    def emb_dim(self) -> int:
        return self.enc_widths[-1]


@dataclass
class ModelState:
    E: Network
    G: Network
    D: Network
    S: Network
    config: ModelConfig
    rng: np.random.Generator

    @property
    def networks(self) -> List[Network]:
        return [self.E, self.G, self.D, self.S]

    def embed(self, x):
        return self.E(x)

    def predict_probs(self, x):
        return self.S(self.E(x))


def build_models(config: ModelConfig, seed: int) -> ModelState:
    init = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    c = config
    w1, w2 = c.enc_widths
    E = Network([Conv3x3(c.C, w1, init), ReLU(), Conv3x3(w1, w2, init), ReLU()], "E")
    S = Network([Dense(w2, c.K, init), SoftmaxPerPixel()], "S")
    G = Network(
        [GaussianNoise(c.gen_noise_std), Conv3x3(w2, c.gen_width, init), ReLU(), Conv3x3(c.gen_width, c.C, init), Tanh()],
        "G",
    )
    D = Network(
        [Conv3x3(c.C, c.disc_width, init, stride=2), ReLU(), Conv3x3(c.disc_width, 1, init, stride=2), Sigmoid()],
        "D",
    )
    noise_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    return ModelState(E, G, D, S, config, noise_rng)


def check_shapes(model: ModelState, H: int, W: int, C: int):
    """Raise StructuralError unless the four blocks chain on an H x W x C image."""
    shape = (H, W, C)
    emb = shape
    for layer in model.E.layers:
        emb = layer.out_shape(emb)
    out = emb
    for layer in model.S.layers:
        out = layer.out_shape(out)
    rec = emb
    for layer in model.G.layers:
        rec = layer.out_shape(rec)
    if rec != shape:
        raise StructuralError(f"generator output {rec} != input shape {shape}")
    d = rec
    for layer in model.D.layers:
        d = layer.out_shape(d)
    return emb


@dataclass
class TrainSchedule:
    total_steps: int = 2000
    warm_start_steps: int = 1000
    eval_every: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seg_loss_warm: LossSpec = field(default_factory=LossSpec.cross_entropy)
    seg_loss_main: LossSpec = field(default_factory=lambda: LossSpec.conservative(lam=5.0))
    recon_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise StructuralError("total_steps must be >= 1")
        if not 0 <= self.warm_start_steps <= self.total_steps:
            raise StructuralError("warm_start_steps must lie in [0, total_steps]")
        if self.eval_every < 1:
            raise StructuralError("eval_every must be >= 1")
        if self.warm_start_steps == 0 and self.seg_loss_main.clamp is None:
            raise StructuralError("cold start requires a clamped main loss")
        if self.warm_start_steps > 0 and self.seg_loss_main.clamp is not None:
            raise StructuralError("warm start must not clamp the main loss")

    @classmethod
    def make(
        cls,
        main_loss: LossSpec,
        total_steps: int = 2000,
        warm: bool = True,
        warm_fraction: float = 0.5,
        eval_every: Optional[int] = None,
        **kw,
    ) -> "TrainSchedule":
        """Schedule with the clamp convention applied: cold start clamps the main loss."""
        warm_steps = int(round(total_steps * warm_fraction)) if warm else 0
        main = main_loss.with_clamp(None if warm else COLD_CLAMP)
        if eval_every is None:
            eval_every = max(1, total_steps // 20)
        return cls(total_steps=total_steps, warm_start_steps=warm_steps, eval_every=eval_every, seg_loss_main=main, **kw)


def select_active_loss(schedule: TrainSchedule, step: int) -> LossSpec:
    """Loss for the update with 0-based index ``step``."""
    if not 0 <= step < schedule.total_steps:
        raise DataError(f"step {step} outside [0, {schedule.total_steps})")
    return schedule.seg_loss_warm if step < schedule.warm_start_steps else schedule.seg_loss_main


@dataclass
class StepLosses:
    step: int = 0
    l_gan_d: Optional[float] = None
    l_gan_g: Optional[float] = None
    l_gan_e: Optional[float] = None
    l_rec: Optional[float] = None
    l_seg_s: Optional[float] = None
    # per-domain terms and domain labels of each adversarial loss, keyed by
    # "d", "g", "e": (source term, target term) and (source label, target label)
    terms: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    labels: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    def merge(self, other: "StepLosses") -> "StepLosses":
        for name in ("l_gan_d", "l_gan_g", "l_gan_e", "l_rec", "l_seg_s"):
            v = getattr(other, name)
            if v is not None:
                setattr(self, name, v)
        self.terms.update(other.terms)
        self.labels.update(other.labels)
        return self


def bce(q: np.ndarray, label: float) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy of scores ``q`` against a constant label, and d/dq."""
    qc = np.clip(q, 1e-12, 1.0 - 1e-12)
    loss = -(label * np.log(qc) + (1.0 - label) * np.log(1.0 - qc))
    grad = (qc - label) / (qc * (1.0 - qc)) / q.size
    return float(loss.mean()), grad


def _finite(name: str, value: float):
    if not math.isfinite(value):
        raise NumericError(f"non-finite {name}: {value}")


def _features(sample: Sample) -> np.ndarray:
    return sample.features


def _embeddings(model: ModelState, src: Sample, tgt: Sample, enc_acts):
    if enc_acts is not None:
        return enc_acts[0][-1], enc_acts[1][-1]
    return model.E(_features(src)), model.E(_features(tgt))


def step_discriminator(
    model: ModelState, src: Sample, tgt: Sample, lr: float = 1e-3, beta1=0.9, beta2=0.999, enc_acts=None
) -> StepLosses:
    out = StepLosses()
    total = 0.0
    terms = []
    embs = _embeddings(model, src, tgt, enc_acts)
    for emb, label in zip(embs, (SOURCE_LABEL, TARGET_LABEL)):
        rec = model.G(emb, train=True, rng=model.rng)
        acts = model.D.forward(rec)
        loss, g = bce(acts[-1], label)
        model.D.backward(acts, g)
        terms.append(loss)
        total += loss
    _finite("L_D", total)
    adam_step(model.D.params, lr, beta1, beta2)
    out.l_gan_d = total
    out.terms["d"] = tuple(terms)
    out.labels["d"] = (SOURCE_LABEL, TARGET_LABEL)
    return out


def step_generator(
    model: ModelState,
    src: Sample,
    tgt: Sample,
    recon_weight: float = 1.0,
    lr: float = 1e-3,
    beta1=0.9,
    beta2=0.999,
    enc_acts=None,
) -> StepLosses:
    out = StepLosses()
    gan, rec_total = 0.0, 0.0
    terms = []
    embs = _embeddings(model, src, tgt, enc_acts)
    for sample, emb, label in ((src, embs[0], TARGET_LABEL), (tgt, embs[1], SOURCE_LABEL)):
        x = _features(sample)
        g_acts = model.G.forward(emb, train=True, rng=model.rng)
        rec = g_acts[-1]
        d_acts = model.D.forward(rec)
        loss, gq = bce(d_acts[-1], label)
        g_rec = model.D.backward(d_acts, gq, need_param_grads=False)
        diff = rec - x
        l1 = float(np.abs(diff).mean())
        g_rec = g_rec + recon_weight * np.sign(diff) / diff.size
        model.G.backward(g_acts, g_rec)
        terms.append(loss)
        gan += loss
        rec_total += l1
    _finite("L_G", gan + recon_weight * rec_total)
    adam_step(model.G.params, lr, beta1, beta2)
    out.l_gan_g = gan
    out.l_rec = rec_total
    out.terms["g"] = tuple(terms)
    out.labels["g"] = (TARGET_LABEL, SOURCE_LABEL)
    return out


def step_encoder(
    model: ModelState,
    src: Sample,
    tgt: Optional[Sample],
    active_loss: LossSpec,
    use_gan: bool = True,
    lr: float = 1e-3,
    beta1=0.9,
    beta2=0.999,
    policy: ProbPolicy = ProbPolicy(),
    enc_acts=None,
) -> StepLosses:
    """One Adam step on E and S for ``L_GAN,E + L_seg^s``.

    The adversarial part scores source reconstructions against the target
    label and target reconstructions against the source label.  The
    segmentation gradient follows the sign of each pixel's loss value, so a
    sign-switching loss ascends where it is negative.
    """
    if src.labels is None or not src.labeled:
        raise DataError("source sample carries no labels")
    out = StepLosses()
    e_acts = enc_acts[0] if enc_acts else model.E.forward(_features(src))
    emb = e_acts[-1]
    s_acts = model.S.forward(emb)
    l_seg, gp = pixelwise_loss(active_loss, s_acts[-1], src.labels, policy, sign_switch=True)
    g_emb = model.S.backward(s_acts, gp)
    total = l_seg

    if use_gan:
        if tgt is None:
            raise DataError("adversarial encoder step needs a target sample")
        gan = 0.0
        terms = []
        t_acts = None
        for which, label in (("src", TARGET_LABEL), ("tgt", SOURCE_LABEL)):
            if which == "src":
                e_out = emb
            else:
                t_acts = enc_acts[1] if enc_acts else model.E.forward(_features(tgt))
                e_out = t_acts[-1]
            g_acts = model.G.forward(e_out, train=True, rng=model.rng)
            d_acts = model.D.forward(g_acts[-1])
            loss, gq = bce(d_acts[-1], label)
            g_r = model.D.backward(d_acts, gq, need_param_grads=False)
            g_e = model.G.backward(g_acts, g_r, need_param_grads=False)
            if which == "src":
                g_emb = g_emb + g_e
            else:
                model.E.backward(t_acts, g_e)
            terms.append(loss)
            gan += loss
        total += gan
        out.l_gan_e = gan
        out.terms["e"] = tuple(terms)
        out.labels["e"] = (TARGET_LABEL, SOURCE_LABEL)

    model.E.backward(e_acts, g_emb)
    _finite("L_E", total)
    adam_step(model.E.params + model.S.params, lr, beta1, beta2)
    out.l_seg_s = l_seg
    return out


def predict(model: ModelState, x) -> np.ndarray:
    """Per-pixel argmax class; ties resolve to the lowest class index."""
    return np.argmax(model.predict_probs(x), axis=-1)


def evaluate(model: ModelState, samples: Sequence[Sample]):
    """Return ``(mIoU, per-class IoU, Confusion)`` over labeled samples."""
    conf = Confusion(model.config.K)
    for s in samples:
        if s.labels is None:
            raise DataError("evaluation needs labeled samples")
        conf.accumulate(predict(model, s.features), s.labels)
    return conf.mean_iou(), conf.iou_per_class(), conf


@dataclass
class HistoryRow:
    step: int
    losses: StepLosses
    source_miou: Optional[float]
    target_miou: Optional[float]
    active_loss: str


@dataclass
class RunHistory:
    rows: List[HistoryRow] = field(default_factory=list)

    def eval_rows(self) -> List[HistoryRow]:
        return [r for r in self.rows if r.target_miou is not None]

    def target_curve(self) -> Tuple[List[int], List[float]]:
        ev = self.eval_rows()
        return [r.step for r in ev], [r.target_miou for r in ev]

    def source_curve(self) -> Tuple[List[int], List[float]]:
        ev = self.eval_rows()
        return [r.step for r in ev], [r.source_miou for r in ev]

    @property
    def final_target_miou(self) -> float:
        return self.eval_rows()[-1].target_miou

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in self.rows:
            L = r.losses
            w.writerow(
                [r.step]
                + [_cell(v) for v in (L.l_gan_d, L.l_gan_g, L.l_gan_e, L.l_rec, L.l_seg_s, r.source_miou, r.target_miou)]
                + [r.active_loss]
            )
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


class TrainingAborted(NumericError):
    def __init__(self, message: str, history: RunHistory):
        super().__init__(message)
        self.history = history


Observer = Callable[[str, int, ModelState, Optional[StepLosses]], None]


def run_training(
    data: Dict[str, List[Sample]],
    schedule: TrainSchedule,
    variant: str = "seg_plus_gan",
    model_config: Optional[ModelConfig] = None,
    model: Optional[ModelState] = None,
    observer: Optional[Observer] = None,
) -> Tuple[RunHistory, ModelState]:
    """Train on ``data`` (splits from :func:`conslab.synth.make_dataset`).

    ``observer(event, step, model, losses)`` is called around every sub-step
    with events ``before_d``, ``after_d``, ``before_g``, ``after_g``,
    ``before_e``, ``after_e``.
    """
    if variant not in VARIANTS:
        raise DataError(f"unknown variant {variant!r}")
    src_train = data["source_train"]
    tgt_train = data["target_train"]
    if model is None:
        if model_config is None:
            s0 = src_train[0]
            model_config = ModelConfig(C=s0.features.shape[2], K=_n_classes(data))
        model = build_models(model_config, schedule.seed)
    s0 = src_train[0]
    check_shapes(model, *s0.features.shape)

    order = np.random.default_rng(np.random.SeedSequence([int(schedule.seed), 3]))
    history = RunHistory()
    hyper = dict(lr=schedule.lr, beta1=schedule.beta1, beta2=schedule.beta2)
    use_gan = variant == "seg_plus_gan"
    notify = observer or (lambda *a: None)

    for i in range(schedule.total_steps):
        step = i + 1
        src = src_train[int(order.integers(len(src_train)))]
        tgt = tgt_train[int(order.integers(len(tgt_train)))]
        active = select_active_loss(schedule, i)
        losses = StepLosses(step=step)
        # E is only updated in the last sub-step, so its activations are shared
        enc = (model.E.forward(src.features), model.E.forward(tgt.features) if use_gan else None)
        try:
            if use_gan:
                notify("before_d", step, model, None)
                losses.merge(step_discriminator(model, src, tgt, enc_acts=enc, **hyper))
                notify("after_d", step, model, losses)
                notify("before_g", step, model, None)
                losses.merge(step_generator(model, src, tgt, schedule.recon_weight, enc_acts=enc, **hyper))
                notify("after_g", step, model, losses)
            notify("before_e", step, model, None)
            losses.merge(
                step_encoder(model, src, tgt if use_gan else None, active, use_gan=use_gan, enc_acts=enc, **hyper)
            )
            notify("after_e", step, model, losses)
        except NumericError as exc:
            history.rows.append(HistoryRow(step, losses, None, None, active.kind.value))
            raise TrainingAborted(f"step {step}: {exc}", history) from exc

        s_miou = t_miou = None
        if step % schedule.eval_every == 0 or step == schedule.total_steps:
            s_miou = evaluate(model, data["source_eval"])[0]
            t_miou = evaluate(model, data["target_eval"])[0]
        history.rows.append(HistoryRow(step, losses, s_miou, t_miou, active.kind.value))
    return history, model


def _n_classes(data) -> int:
    return int(max(int(s.labels.max()) for s in data["source_train"]) + 1)
