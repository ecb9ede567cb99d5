"""Training, frozen-teacher distillation, evaluation and the ablation harness."""

from __future__ import annotations

import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import aatm, alignfuse, checkpoint as ckio
from . import numcore as nc
from .boxes import Detections, Truth
from .checkpoint import Checkpoint
from .config import DistillConfig, config_hash, to_dict
from .detnet import ROLES, TEACHER_ROLES, ConfigError, Network, build
from .detnet import decode_boxes
from .evalmetrics import CSV_FIELDS, EvalReport, evaluate, nms, report_csv
from .losses import combine_detection, detection_components, total_loss
from .numcore import ContractError, NumericError, Tensor
from .synthdata import SyntheticDataset, make_split

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, components: dict):
        self.step = step
        self.components = components
        parts = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step} ({parts})")


# --- optimizers ---------------------------------------------------------------------

class Optimizer:
    """Shared plumbing: named parameters, zero_grad, state export for checkpoints."""

    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = float(lr)
        self.state: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.state = {k: np.array(v, dtype=np.float64 if k.endswith("#step") else v.dtype) for k, v in state.items()}


class SGD(Optimizer):
    """Heavy-ball momentum: v = m v + g; p -= lr v."""

    def __init__(self, params, lr, momentum: float = 0.9):
        super().__init__(params, lr)
        self.momentum = momentum

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.state.get(name + "#v")
            v = p.grad.astype(p.data.dtype) if v is None else self.momentum * v + p.grad
            self.state[name + "#v"] = v.astype(p.data.dtype)
            p.data = p.data - self.lr * self.state[name + "#v"]


class Adam(Optimizer):
    def __init__(self, params, lr, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.state.get(name + "#m", np.zeros_like(p.data))
            v = self.state.get(name + "#v", np.zeros_like(p.data))
            t = int(self.state.get(name + "#step", np.zeros(()))) + 1
            m = (self.b1 * m + (1 - self.b1) * g).astype(p.data.dtype)
            v = (self.b2 * v + (1 - self.b2) * g * g).astype(p.data.dtype)
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            self.state[name + "#m"], self.state[name + "#v"] = m, v
            self.state[name + "#step"] = np.array(float(t))
            p.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


def make_optimizer(kind: str, params: dict[str, Tensor], lr: float) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


# --- data and evaluation ----------------------------------------------------------------

def sub_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 7919])).permutation(n)


def batches(ds: SyntheticDataset, batch_size: int, order: np.ndarray):
    images, truths = ds.images, ds.truths
    for a in range(0, len(order), batch_size):
        idx = order[a:a + batch_size]
        yield Tensor(images[idx]), [truths[i] for i in idx]


def predict(net: Network, images: np.ndarray, batch_size: int = 16, score_thresh: float = 0.05,
            nms_iou: float = 0.6) -> list[Detections]:
    out = []
    with nc.no_grad():
        for a in range(0, len(images), batch_size):
            _, head = net(Tensor(images[a:a + batch_size]))
            out += [nms(d, nms_iou) for d in decode_boxes(head, score_thresh)]
    return out


def evaluate_network(net: Network, ds: SyntheticDataset, cfg: DistillConfig) -> EvalReport:
    dets = predict(net, ds.images, score_thresh=cfg.score_thresh, nms_iou=cfg.nms_iou)
    return evaluate(dets, ds.truths, net.config.num_classes, cfg.score_thresh)


# --- checkpoints <-> networks -------------------------------------------------------------

def params_to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.astype(np.float32) for k, p in params.items()}


def load_network(ckpt: Checkpoint, netcfg, prefix: str = "") -> Network:
    """Rebuild a network, checking every parameter name and shape against the config."""
    ref = build(netcfg, 0)
    params = {}
    for name, p in ref.params.items():
        key = prefix + name
        if key not in ckpt.params:
            raise ConfigError(f"checkpoint lacks parameter {key!r} required by {netcfg.role}")
        arr = ckpt.params[key]
        if arr.shape != p.shape:
            raise ConfigError(f"parameter {key!r}: checkpoint shape {arr.shape} vs config {p.shape}")
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return Network(netcfg, params)


def _divergence_check(step: int, comps: dict[str, float]) -> None:
    if not all(math.isfinite(v) for v in comps.values()):
        raise TrainingDivergence(step, comps)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    network: Network  # best-val parameters
    history: list = field(default_factory=list)  # per-epoch dicts
    best_val: EvalReport | None = None
    seconds: float = 0.0


@dataclass
class Data:
    train: SyntheticDataset
    val: SyntheticDataset
    test: SyntheticDataset


def make_data(cfg: DistillConfig) -> Data:
    return Data(*make_split(cfg.scene, cfg.n_train, cfg.n_val, cfg.n_test, cfg.threads))


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


# --- detector training (teachers and the stand-alone student) --------------------------

def train_detector(cfg: DistillConfig, role: str, data: Data | None = None, epochs: int | None = None,
                   resume: Checkpoint | None = None, on_epoch: Callable | None = None) -> TrainResult:
    """Minimise the detection loss only; keep the parameters with the best val mAP@0.5."""
    if role not in ROLES:
        raise ConfigError(f"unknown role {role!r}")
    netcfg = cfg.teachers[role] if role in TEACHER_ROLES else cfg.student_net
    epochs = (cfg.teacher_epochs if role in TEACHER_ROLES else cfg.distill_epochs) if epochs is None else epochs
    data = data or make_data(cfg)
    t0 = time.perf_counter()
    with threadpool_limits(cfg.threads), nc.precision(cfg.precision):
        seed = sub_seed(cfg.seed, ROLES.index(role))
        if resume is not None:
            net = load_network(resume, netcfg)
            start = resume.epoch
        else:
            net = build(netcfg, seed)
            start = 0
        opt = make_optimizer(cfg.optimizer, net.params, cfg.lr_student)
        if resume is not None:
            opt.load_state_dict(resume.opt_state)
        best = resume
        best_net = net if resume is not None else None
        best_map = -1.0
        history = []
        step = 0
        for epoch in range(start, start + epochs):
            losses = []
            for images, truths in batches(data.train, cfg.batch_size, epoch_order(len(data.train), seed, epoch)):
                try:
                    _, head = net(images)
                    comps = detection_components(head, truths, cfg.loss.beta)
                    loss = combine_detection(comps, cfg.loss)
                except NumericError as e:
                    raise TrainingDivergence(step, {"error": float("nan")}) from e
                vals = {k: float(np.asarray(v.data if isinstance(v, Tensor) else v)) for k, v in comps.items()}
                vals["loss"] = float(loss.data)
                _divergence_check(step, vals)
                opt.zero_grad()
                nc.backward(loss)
                opt.step()
                losses.append(vals["loss"])
                step += 1
            rep = evaluate_network(net, data.val, cfg)
            rec = {"epoch": epoch + 1, "loss": float(np.mean(losses)) if losses else float("nan"),
                   "val_map50": rep.map_50}
            history.append(rec)
            log.info("%s epoch %d loss %.4f val mAP50 %.4f", role, epoch + 1, rec["loss"], rep.map_50)
            if on_epoch:
                on_epoch(rec)
            if rep.map_50 > best_map:
                best_map = rep.map_50
                best = Checkpoint(config_hash(cfg), epoch + 1, params_to_arrays(net.params),
                                  {k: v.astype(np.float32) for k, v in opt.state_dict().items()},
                                  {"seed": cfg.seed, "role": ROLES.index(role)})
                best_net = Network(netcfg, {k: Tensor(v) for k, v in _snapshot(net.params).items()})
                best_rep = rep
        if best is None:  # zero epochs from scratch
            best = Checkpoint(config_hash(cfg), 0, params_to_arrays(net.params), {},
                              {"seed": cfg.seed, "role": ROLES.index(role)})
            best_net, best_rep = net, None
        elif not history:
            best_rep = None
    return TrainResult(best, best_net, history, best_rep, time.perf_counter() - t0)


def train_teacher(cfg: DistillConfig, role: str, data: Data | None = None, **kw) -> TrainResult:
    if role not in TEACHER_ROLES:
        raise ConfigError(f"train_teacher needs a teacher role, got {role!r}")
    return train_detector(cfg, role, data, **kw)


# --- distillation ---------------------------------------------------------------------------

@dataclass
class DistillModules:
    """Everything trained alongside the student, plus the frozen teacher-side fusion."""

    teacher_align: dict  # role -> [AlignSpec per level]
    fusion: list  # per level: FusionParams | None
    student_align: list
    generator: aatm.Generator | None
    discriminators: list

    def trainable(self, include_fusion: bool) -> dict[str, Tensor]:
        out = {}
        for i, a in enumerate(self.student_align):
            out[f"align{i}.weight"], out[f"align{i}.bias"] = a.conv_weight, a.conv_bias
        if self.generator is not None:
            for j, p in enumerate(self.generator.parameters()):
                out[f"generator.{j}"] = p
        if include_fusion:
            out.update(self.fusion_params())
        return out

    def fusion_params(self) -> dict[str, Tensor]:
        out = {}
        for role, specs in self.teacher_align.items():
            for i, a in enumerate(specs):
                out[f"talign.{role}.{i}.weight"], out[f"talign.{role}.{i}.bias"] = a.conv_weight, a.conv_bias
        for i, f in enumerate(self.fusion):
            if f is not None:
                for j, p in enumerate(f.parameters()):
                    out[f"fusion{i}.{j}"] = p
        return out

    def disc_params(self) -> dict[str, Tensor]:
        return {f"disc{i}.{j}": p for i, d in enumerate(self.discriminators) for j, p in enumerate(d.parameters())}


def level_shapes(net: Network, image_size: int) -> list[tuple[int, int]]:
    return [(image_size // s, image_size // s) for s in net.config.strides]


def make_modules(cfg: DistillConfig, student: Network, seed: int) -> DistillModules:
    rng = np.random.default_rng(sub_seed(seed, 101))
    C = cfg.fusion_channels
    shapes = level_shapes(student, cfg.scene.image_size)
    talign = {}
    for role in TEACHER_ROLES:
        tc = cfg.teachers[role]
        talign[role] = [alignfuse.AlignSpec.init(tc.pyramid_channels, C, h, w, rng) for h, w in shapes]
    fusion = [alignfuse.FusionParams.init(C, len(TEACHER_ROLES)) if cfg.fusion == "lwff" else None
              for _ in shapes]
    salign = [alignfuse.AlignSpec.init(student.config.pyramid_channels, C, h, w, rng) for h, w in shapes]
    if cfg.use_aatm:
        gen = aatm.Generator.init(C, rng)
        discs = [aatm.Discriminator.init(C * h * w, rng) for h, w in shapes]
    else:
        gen, discs = None, []
    return DistillModules(talign, fusion, salign, gen, discs)


def fuse_teachers(cfg: DistillConfig, mods: DistillModules, teacher_feats: dict) -> list[Tensor]:
    """Per level: AFA each teacher to the fusion shape, then LWFF / sum / concat."""
    out = []
    L = len(mods.student_align)
    for i in range(L):
        aligned = []
        for role in TEACHER_ROLES:
            f = teacher_feats[role][i]
            try:
                aligned.append(alignfuse.afa_apply(f, mods.teacher_align[role][i]))
            except nc.DimensionError as e:
                raise ConfigError(f"level {i}, teacher {role}: {e}") from e
        if cfg.fusion == "lwff":
            out.append(alignfuse.lwff_fuse(aligned, mods.fusion[i]))
        else:
            out.append(alignfuse.fuse_baselines(aligned, cfg.fusion))
    return out


def student_features(mods: DistillModules, feats) -> list[Tensor]:
    out = []
    for i, f in enumerate(feats.levels):
        try:
            x = alignfuse.afa_apply(f, mods.student_align[i])
        except nc.DimensionError as e:
            raise ConfigError(f"level {i}, student features: {e}") from e
        out.append(aatm.generate(mods.generator, x) if mods.generator is not None else x)
    return out


def distill_step_losses(cfg: DistillConfig, teachers: dict, student: Network, mods: DistillModules,
                        images: Tensor, truths: Sequence[Truth]):
    """Forward pass of one distillation step; returns (T, S, head, det comps)."""
    with nc.no_grad():
        tfeats = {role: net(images)[0].levels for role, net in teachers.items()}
    if cfg.train_fusion:
        T = fuse_teachers(cfg, mods, tfeats)
    else:
        with nc.no_grad():
            T = fuse_teachers(cfg, mods, tfeats)
    feats, head = student(images)
    S = student_features(mods, feats)
    for i, (t, s) in enumerate(zip(T, S)):
        if t.shape != s.shape:
            raise ConfigError(f"level {i}: fused teacher {t.shape} vs generated student {s.shape}")
    comps = detection_components(head, truths, cfg.loss.beta)
    return T, S, head, comps


def teachers_checksum(teachers: dict) -> str:
    return nc.parameters_checksum([p for role in sorted(teachers) for p in teachers[role].parameters()])


@dataclass
class DistillResult(TrainResult):
    teacher_checksum: str = ""


def distill(cfg: DistillConfig, teacher_ckpts: dict | Sequence[Checkpoint], data: Data | None = None,
            epochs: int | None = None, on_epoch: Callable | None = None) -> DistillResult:
    """Frozen teachers -> AFA -> fusion -> T_i; student -> AFA -> G; alternate D and student updates."""
    if not cfg.distillation:
        res = train_detector(cfg, "student", data, epochs)
        return DistillResult(res.checkpoint, res.network, res.history, res.best_val, res.seconds)
    if not isinstance(teacher_ckpts, dict):
        teacher_ckpts = dict(zip(TEACHER_ROLES, teacher_ckpts))
    if set(teacher_ckpts) != set(TEACHER_ROLES):
        raise ConfigError(f"need checkpoints for {TEACHER_ROLES}, got {sorted(teacher_ckpts)}")
    epochs = cfg.distill_epochs if epochs is None else epochs
    data = data or make_data(cfg)
    t0 = time.perf_counter()
    w = cfg.loss
    with threadpool_limits(cfg.threads), nc.precision(cfg.precision):
        teachers = {r: load_network(teacher_ckpts[r], cfg.teachers[r]) for r in TEACHER_ROLES}
        for net in teachers.values():
            for p in net.parameters():
                p.requires_grad = False
        before = teachers_checksum(teachers)

        seed = sub_seed(cfg.seed, ROLES.index("student"))
        student = build(cfg.student_net, seed)
        mods = make_modules(cfg, student, seed)
        main_params = {f"net.{k}": p for k, p in student.params.items()}
        main_params.update({f"distill.{k}": p for k, p in mods.trainable(cfg.train_fusion).items()})
        opt = make_optimizer(cfg.optimizer, main_params, cfg.lr_student)
        gen_names = [k for k in main_params if k.startswith("distill.generator")]
        if gen_names and cfg.lr_generator != cfg.lr_student:
            opt_g = make_optimizer(cfg.optimizer, {k: main_params.pop(k) for k in gen_names}, cfg.lr_generator)
            opt.params = main_params
        else:
            opt_g = None
        opt_d = make_optimizer(cfg.optimizer, mods.disc_params(), cfg.lr_discriminator) if cfg.use_aatm else None

        best, best_net, best_rep, best_map = None, student, None, -1.0
        history = []
        step = 0
        for epoch in range(epochs):
            sums: dict[str, list] = {"det": [], "dist": [], "adv": [], "d": []}
            for images, truths in batches(data.train, cfg.batch_size, epoch_order(len(data.train), seed, epoch)):
                try:
                    T, S, head, comps = distill_step_losses(cfg, teachers, student, mods, images, truths)
                    l_det = combine_detection(comps, w)
                    if cfg.use_aatm:
                        adv_batches = [aatm.AdversarialBatch(i, t, s) for i, (t, s) in enumerate(zip(T, S))]
                        for _ in range(cfg.d_steps):
                            ld = aatm.d_loss(adv_batches, mods.discriminators)
                            opt_d.zero_grad()
                            nc.backward(ld)
                            opt_d.step()
                        sums["d"].append(float(ld.data))
                        l_adv = aatm.g_loss(adv_batches, mods.discriminators, cfg.generator_loss)
                    else:
                        l_adv = Tensor(0.0)
                    l_dist = None
                    for t, s in zip(T, S):
                        term = nc.square(t - s).mean()
                        l_dist = term if l_dist is None else l_dist + term
                    loss, parts = total_loss(l_det, l_dist, l_adv, w)
                except NumericError as e:
                    raise TrainingDivergence(step, {"error": float("nan")}) from e
                parts["loss"] = float(loss.data)
                _divergence_check(step, parts)
                opt.zero_grad()
                if opt_g is not None:
                    opt_g.zero_grad()
                nc.backward(loss)
                opt.step()
                if opt_g is not None:
                    opt_g.step()
                for k in ("det", "dist", "adv"):
                    sums[k].append(parts[k])
                step += 1
            rep = evaluate_network(student, data.val, cfg)
            rec = {"epoch": epoch + 1, **{k: float(np.mean(v)) if v else 0.0 for k, v in sums.items()},
                   "val_map50": rep.map_50}
            history.append(rec)
            log.info("distill epoch %d det %.4f dist %.4f adv %.4f val mAP50 %.4f",
                     epoch + 1, rec["det"], rec["dist"], rec["adv"], rep.map_50)
            if on_epoch:
                on_epoch(rec)
            if rep.map_50 > best_map:
                best_map, best_rep = rep.map_50, rep
                arrays = {k: p.data.astype(np.float32) for k, p in student.params.items()}
                arrays.update({f"distill.{k}": p.data.astype(np.float32)
                               for k, p in mods.trainable(True).items()})
                best = Checkpoint(config_hash(cfg), epoch + 1, arrays,
                                  {k: v.astype(np.float32) for k, v in opt.state_dict().items()},
                                  {"seed": cfg.seed, "role": ROLES.index("student")})
                best_net = Network(student.config, {k: Tensor(v) for k, v in _snapshot(student.params).items()})
        if best is None:
            best = Checkpoint(config_hash(cfg), 0, params_to_arrays(student.params), {},
                              {"seed": cfg.seed, "role": ROLES.index("student")})
        after = teachers_checksum(teachers)
        if after != before:
            raise ContractError("teacher parameters changed during distillation")
    return DistillResult(best, best_net, history, best_rep, time.perf_counter() - t0, after)


# --- run metadata and ablations ---------------------------------------------------------------

def run_metadata(cfg: DistillConfig, overrides: dict | None = None, **extra) -> dict:
    from .config import DEVIATION_FLAGS

    return {
        "config_hash": config_hash(cfg),
        "config": to_dict(cfg),
        "deviation_flags": cfg.deviation_flags(),
        "deviation_notes": DEVIATION_FLAGS,
        "overrides": dict(overrides or {}),
        "numpy": np.__version__,
        "python": platform.python_version(),
        **extra,
    }


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def pretrain_teachers(cfg: DistillConfig, data: Data | None = None) -> dict[str, TrainResult]:
    data = data or make_data(cfg)
    return {r: train_teacher(cfg, r, data) for r in TEACHER_ROLES}


@dataclass
class AblationResult:
    rows: list
    csv: str
    failures: dict
    reports: dict  # (variant, seed) -> EvalReport


def ablate(cfg: DistillConfig, grid: dict[str, dict], seeds: Sequence[int],
           teacher_ckpts: dict | None = None, data: Data | None = None) -> AblationResult:
    """Run each named variant (scalar config overrides) for every seed on the test split.

    One CSV row per (variant, seed), then one mean row per variant. A failing
    run yields a row of NaNs and its message in ``failures``.
    """
    from .config import with_overrides

    data = data or make_data(cfg)
    if teacher_ckpts is None and any(with_overrides(cfg, o).distillation for o in grid.values()):
        teacher_ckpts = {r: res.checkpoint for r, res in pretrain_teachers(cfg, data).items()}
    rows, means, failures, reports = [], [], {}, {}
    for name, overrides in grid.items():
        per = []
        for s in seeds:
            run_id = f"{name}-seed{s}"
            try:
                vcfg = with_overrides(cfg, {**overrides, "seed": s})
                res = distill(vcfg, teacher_ckpts, data)
                rep = evaluate_network(res.network, data.test, vcfg)
                reports[(name, s)] = rep
                rows.append(rep.csv_row(run_id, name))
                per.append(rep)
            except Exception as e:  # recorded per row, other variants continue
                log.warning("variant %s seed %s failed: %s", name, s, e)
                failures[run_id] = f"{type(e).__name__}: {e}"
                rows.append([run_id, name, "nan", "nan", "nan", -1, -1, -1])
        if per:
            m = EvalReport(float(np.mean([r.map_50 for r in per])), float(np.mean([r.map_50_95 for r in per])),
                           float(np.mean([r.recall for r in per])), [],
                           sum(r.tp for r in per), sum(r.fp for r in per), sum(r.fn for r in per))
            means.append(m.csv_row("mean", name))
        else:
            means.append(["mean", name, "nan", "nan", "nan", -1, -1, -1])
    rows = rows + means
    return AblationResult(rows, report_csv(rows), failures, reports)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckio.save(ckpt, path)


def load_checkpoint(path) -> Checkpoint:
    return ckio.load(path)


__all__ = [
    "SGD", "Adam", "make_optimizer", "train_detector", "train_teacher", "distill", "ablate",
    "evaluate_network", "predict", "load_network", "run_metadata", "TrainingDivergence", "CSV_FIELDS",
]
