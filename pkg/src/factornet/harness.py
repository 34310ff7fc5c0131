"""Experiment runner: configs, training loop, checkpoints and seed grids."""
import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diagnostics as diag
from .data import make_dataset
from .factorization import (FactorizePolicy, collapse, compression_report,
                            factorize_model, rank_from_scale, scale_for_rate,
                            weighted_layers)
from .layers import BatchNorm, Embedding, MultiHeadAttention, softmax_cross_entropy
from .models import build_architecture
from .optim import FLAMBe, LAMB, SGD, lr_schedule
from .regularization import DecayConfig, decay_gradients
from .tensor import Rng

log = logging.getLogger(__name__)

OUT_ENV = "FACTORNET_OUT"
TASKS = ("blobs_cls", "patches_cls", "seq_copy")
OPTIMIZERS = ("sgd", "lamb", "flambe")


def default_out_dir():
    return os.environ.get(OUT_ENV, "runs")


@dataclass
class FactorizeConfig:
    enabled: bool = False
    mode: str = "lowrank"
    rank: int = None
    scale: float = None
    rate: float = None
    spectral: bool = True
    attn_rank: int = None


@dataclass
class ScheduleConfig:
    kind: str = "constant"
    milestones: list = field(default_factory=list)  # in epochs
    warmup: int = 0  # in steps
    gamma: float = 0.1


@dataclass
class ExperimentConfig:
    name: str = "run"
    task: str = "blobs_cls"
    task_args: dict = field(default_factory=dict)
    n_train: int = 512
    n_eval: int = 512
    arch: str = "mlp"
    arch_args: dict = field(default_factory=dict)
    factorize: FactorizeConfig = field(default_factory=FactorizeConfig)
    decay: DecayConfig = field(default_factory=DecayConfig)
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    norm_match: DecayConfig = None  # reference decay for a norm-matched run

    def __post_init__(self):
        if isinstance(self.factorize, dict):
            self.factorize = FactorizeConfig(**self.factorize)
        if isinstance(self.decay, dict):
            self.decay = DecayConfig(**self.decay)
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)
        if isinstance(self.norm_match, dict):
            self.norm_match = DecayConfig(**self.norm_match)
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("need epochs >= 0 and batch_size >= 2")
        if self.optimizer == "flambe" and not (self.factorize.enabled or self.arch == "tiny_attn"):
            raise ValueError("flambe needs factorized parameters")
        if self.optimizer == "flambe" and self.decay.mode not in ("FD", "none"):
            raise ValueError("flambe applies Frobenius decay; use decay mode FD")
        if self.optimizer == "lamb" and self.decay.mode == "FD":
            raise ValueError("Frobenius decay under LAMB is the flambe optimizer")
        if self.norm_match is not None and self.decay.mode != "none":
            raise ValueError("a norm-matched run must itself use decay mode 'none'")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **overrides):
        return ExperimentConfig.from_dict(deep_merge(self.to_dict(), overrides))


def deep_merge(base, overrides):
    out = copy.deepcopy(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# model construction


def build_model(cfg):
    """Architecture from ``cfg`` with its factorization policy applied."""
    arch_args = dict(cfg.arch_args)
    if cfg.task == "seq_copy":
        arch_args.setdefault("vocab", cfg.task_args.get("vocab", 8))
    else:
        arch_args.setdefault("classes", cfg.task_args.get("classes", 4))
    if cfg.task == "blobs_cls":
        arch_args.setdefault("dim", cfg.task_args.get("dim", 16))
    model = build_architecture(cfg.arch, seed=cfg.seed, **arch_args)
    fz = cfg.factorize
    if not fz.enabled:
        return model
    scale = fz.scale
    if fz.mode == "lowrank":
        if fz.rate is not None:
            scale, _ = scale_for_rate(model, fz.rate)
        if fz.rank is not None:
            bad = [f"{l.name} (max rank {min(l.matrix_shape)})"
                   for l in weighted_layers(model)[1:-1] if fz.rank > min(l.matrix_shape)]
            if bad:
                raise ValueError(f"rank {fz.rank} infeasible for: {', '.join(bad)}")
        elif scale is None:
            raise ValueError("lowrank factorization needs rank, scale or rate")
    policy = FactorizePolicy(mode=fz.mode, scale=scale, rank=fz.rank, spectral=fz.spectral,
                             attn_rank=fz.attn_rank, seed=cfg.seed)
    return factorize_model(model, policy)


def fc_conv_factorized(model):
    return [l.weight for l in weighted_layers(model) if hasattr(l.weight, "inner")]


def _report(model):
    return compression_report(model) if fc_conv_factorized(model) else None


def make_optimizer(cfg, model):
    params = model.parameters()
    dc = cfg.decay
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.momentum)
    report = _report(model)
    betas = tuple(cfg.betas)
    if cfg.optimizer == "lamb":
        return LAMB(params, cfg.lr, dc.lam, betas,
                    decay_fn=lambda: decay_gradients(model, dc, report))
    # flambe: Frobenius decay on factorized fc/conv weights and targeted
    # attention forms; every other decayed weight gets lam * P
    factorized = fc_conv_factorized(model)
    decayed = [p for fp in factorized for p in fp.params()]
    decayed += [l.weight for l in weighted_layers(model) if not hasattr(l.weight, "inner")]
    for layer in model.layers:
        if isinstance(layer, MultiHeadAttention):
            factorized += layer.ov + (layer.qk if dc.mha_target == "OV_and_QK" else [])
            decayed += layer.parameters()
        elif isinstance(layer, Embedding):
            decayed.append(layer.weight)
    return FLAMBe(params, factorized, cfg.lr, dc.lam if dc.mode == "FD" else 0.0, betas,
                  decay_params=decayed)


# ---------------------------------------------------------------------------
# training


def _batch_loss(model, x, y, train):
    out = model.forward(x, train=train)
    logits = out.reshape(-1, out.shape[-1])
    loss, grad = softmax_cross_entropy(logits, y.reshape(-1))
    return loss, grad.reshape(out.shape), logits


def evaluate(model, data):
    loss, _, logits = _batch_loss(model, data.x, data.y, train=False)
    return loss, diag.accuracy(logits, data.y.reshape(-1)), logits


def predictions(model, data):
    out = model.forward(data.x, train=False)
    return np.argmax(out.reshape(-1, out.shape[-1]), axis=1)


def layer_norms(model):
    return {l.name: diag.layer_norm(l) for l in weighted_layers(model)}


@dataclass
class RunResult:
    metrics: dict
    trace: diag.MetricTrace
    checkpoint: dict
    model: object = None


def _epoch_diagnostics(model, trace, step, lr, data_eval, data_train_eval):
    loss, acc, _ = evaluate(model, data_eval)
    trace.add(step, "eval", "loss", loss)
    trace.add(step, "eval", "accuracy", acc)
    tl, ta, _ = evaluate(model, data_train_eval)
    trace.add(step, "eval", "train_loss", tl)
    trace.add(step, "eval", "train_accuracy", ta)
    normalized_fact = [l for l in diag.normalized_weighted_layers(model)
                       if hasattr(l.weight, "inner")]
    if normalized_fact:
        trace.add(step, "eval", "eff_step_size", diag.effective_step_size(model, lr, normalized_fact))
    if any(not fp.inner for fp in fc_conv_factorized(model)):
        nuc, bound = diag.nuclear_trace(model)
        trace.add(step, "eval", "nuclear_mean", nuc)
        trace.add(step, "eval", "factor_bound_mean", bound)
    for name, v in layer_norms(model).items():
        trace.add(step, "eval", f"wnorm/{name}", v)
    return loss, acc


def reference_norms(cfg):
    """Per-step layer norms of the reference run paired with a norm-matched config."""
    ref_cfg = cfg.replace(norm_match=None, name=cfg.name + "-reference")
    ref_cfg.decay = cfg.norm_match
    res = train(ref_cfg)
    norms = {}
    for step, phase, metric, value in res.trace.rows:
        if phase == "train" and metric.startswith("wnorm/"):
            norms.setdefault(step, {})[metric[len("wnorm/"):]] = value
    return norms


def train(cfg, resume=None, stop_after_epoch=None):
    """Train ``cfg`` from scratch or from a checkpoint dict ``resume``.

    Returns final metrics, the metric trace and an end-of-run checkpoint.
    ``stop_after_epoch`` ends the run early (for checkpoint round trips).
    """
    targets = reference_norms(cfg) if cfg.norm_match is not None else None
    data_args = dict(cfg.task_args)
    train_set = make_dataset(cfg.task, cfg.n_train, cfg.seed, 0, **data_args)
    eval_set = make_dataset(cfg.task, cfg.n_eval, cfg.seed, 1, **data_args)
    model = build_model(cfg)
    opt = make_optimizer(cfg, model)
    report = _report(model)
    shuffle = Rng(cfg.seed, 500)
    trace = diag.MetricTrace()
    steps_per_epoch = len(train_set) // cfg.batch_size
    milestones = [m * steps_per_epoch for m in cfg.schedule.milestones]
    start_epoch, step = 0, 0

    def lr_at(s):
        return lr_schedule(cfg.schedule.kind, s, cfg.lr, milestones,
                           cfg.schedule.warmup, cfg.schedule.gamma)

    if resume is not None:
        start_epoch, step = restore_checkpoint(resume, cfg, model, opt, shuffle, trace)
    else:
        _epoch_diagnostics(model, trace, 0, lr_at(0), eval_set, train_set)

    params = model.parameters()
    by_id = {id(p): p for p in params}
    end_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    for epoch in range(start_epoch, end_epoch):
        order = shuffle.permutation(len(train_set))
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, y = train_set.batch(idx)
            for p in params:
                p.zero_grad()
            loss, dout, _ = _batch_loss(model, x, y, train=True)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"{cfg.name}: non-finite loss at step {step}, epoch {epoch}")
            model.backward(dout)
            lr = lr_at(step)
            opt.lr = lr
            if cfg.optimizer == "sgd":
                for pid, g in decay_gradients(model, cfg.decay, report).items():
                    by_id[pid].grad += g
            opt.step()
            step += 1
            if targets is not None:
                diag.norm_matching_controller(model, targets[step])
            trace.add(step, "train", "loss", loss)
            trace.add(step, "train", "lr", lr)
            for name, v in layer_norms(model).items():
                if not math.isfinite(v):
                    raise TrainingDiverged(f"{cfg.name}: non-finite weights in {name} at step {step}")
                trace.add(step, "train", f"wnorm/{name}", v)
        _epoch_diagnostics(model, trace, step, lr_at(step), eval_set, train_set)

    ckpt = make_checkpoint(cfg, model, opt, shuffle, trace, max(end_epoch, start_epoch), step)
    metrics = final_metrics(cfg, model, trace, eval_set, report)
    return RunResult(metrics, trace, ckpt, model)


def final_metrics(cfg, model, trace, eval_set, report):
    m = {
        "eval_accuracy": trace.values("accuracy", "eval")[-1],
        "eval_loss": trace.values("loss", "eval")[-1],
        "train_accuracy": trace.values("train_accuracy", "eval")[-1],
        "train_loss": trace.values("train_loss", "eval")[-1],
    }
    if report is not None:
        m["compression_rate"] = report.rate
    for key in ("eff_step_size", "nuclear_mean", "factor_bound_mean"):
        vals = trace.values(key, "eval")
        if vals:
            m[key] = vals[-1]
    if "nuclear_mean" in m:
        m["bound_relative_gap"] = (m["factor_bound_mean"] - m["nuclear_mean"]) / m["factor_bound_mean"]
    if fc_conv_factorized(model):
        same = np.array_equal(predictions(model, eval_set), predictions(collapse(model), eval_set))
        m["collapse_match"] = float(same)
    return m


# ---------------------------------------------------------------------------
# checkpoints


def _encode(a):
    return {"shape": list(np.shape(a)),
            "data": " ".join(repr(float(v)) for v in np.ravel(a))}


def _decode(d):
    vals = [float(t) for t in d["data"].split()] if d["data"] else []
    return np.array(vals, dtype=np.float64).reshape(d["shape"])


def make_checkpoint(cfg, model, opt, shuffle, trace, epoch, step):
    state = opt.state_dict()
    return {
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "epoch": epoch,
        "step": step,
        "params": [dict(name=p.name, **_encode(p.value)) for p in model.parameters()],
        "buffers": [dict(name=n, **_encode(getattr(l, a))) for n, l, a in model.buffers()],
        "optimizer": {k: ([_encode(a) for a in v] if isinstance(v, list) else v)
                      for k, v in state.items()},
        "rng": shuffle.state,
        "trace": [list(r) for r in trace.rows],
    }


def restore_checkpoint(ckpt, cfg, model, opt, shuffle, trace):
    if ckpt["config_hash"] != cfg.hash():
        raise ValueError("checkpoint was written for a different config")
    params = model.parameters()
    if len(params) != len(ckpt["params"]):
        raise ValueError("checkpoint parameter count does not match the model")
    for p, d in zip(params, ckpt["params"]):
        p.value = _decode(d)
    for (_, layer, attr), d in zip(model.buffers(), ckpt["buffers"]):
        setattr(layer, attr, _decode(d))
    opt.load_state_dict({k: ([_decode(a) for a in v] if isinstance(v, list) else v)
                         for k, v in ckpt["optimizer"].items()})
    shuffle.state = ckpt["rng"]
    trace.rows = [(int(s), ph, m, float(v)) for s, ph, m, v in ckpt["trace"]]
    return ckpt["epoch"], ckpt["step"]


def save_checkpoint(ckpt, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(ckpt, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def model_from_checkpoint(ckpt):
    cfg = ExperimentConfig.from_dict(ckpt["config"])
    model = build_model(cfg)
    for p, d in zip(model.parameters(), ckpt["params"]):
        p.value = _decode(d)
    for (_, layer, attr), d in zip(model.buffers(), ckpt["buffers"]):
        setattr(layer, attr, _decode(d))
    return cfg, model


def write_run(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    result.trace.write_csv(os.path.join(out_dir, "metrics.csv"))
    save_checkpoint(result.checkpoint, os.path.join(out_dir, "checkpoint.json"))
    with open(os.path.join(out_dir, "final.json"), "w", encoding="utf-8") as fh:
        json.dump(result.metrics, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# seed grids


SUMMARY_METRICS = ("eval_accuracy", "eval_loss", "train_loss", "eff_step_size", "bound_relative_gap")


@dataclass
class Grid:
    name: str
    base: dict
    cells: dict
    seeds: list
    assertions: list = field(default_factory=list)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    def config(self, cell, seed):
        d = deep_merge(self.base, self.cells[cell])
        d["seed"] = seed
        d["name"] = f"{self.name}/{cell}/seed{seed}"
        return ExperimentConfig.from_dict(d)


def _mean_std(vals):
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def pooled_se(a, b):
    """Standard error of the difference of two sample means."""
    _, sa = _mean_std(a)
    _, sb = _mean_std(b)
    return math.sqrt(sa ** 2 / len(a) + sb ** 2 / len(b))


@dataclass
class SuiteResult:
    rows: list
    summary: dict
    checks: list
    failures: list

    @property
    def ok(self):
        return not self.failures and all(c["passed"] for c in self.checks)


def evaluate_assertion(spec, per_cell):
    kind = spec["type"]
    metric = spec.get("metric", "eval_accuracy")
    if kind in ("ge", "gt"):
        a = [r[metric] for r in per_cell[spec["left"]]]
        b = [r[metric] for r in per_cell[spec["right"]]]
        slack = pooled_se(a, b) if spec.get("slack") == "pooled_se" else float(spec.get("slack", 0.0))
        ma, mb = float(np.mean(a)), float(np.mean(b))
        passed = ma >= mb - slack if kind == "ge" else ma > mb + slack
        desc = (f"{spec['left']} {metric} {ma:.4f} {'>=' if kind == 'ge' else '>'} "
                f"{spec['right']} {mb:.4f} {'-' if kind == 'ge' else '+'} {slack:.4f}")
    elif kind == "min":
        m = float(np.mean([r[metric] for r in per_cell[spec["cell"]]]))
        passed = m >= spec["value"]
        desc = f"{spec['cell']} mean {metric} {m:.4f} >= {spec['value']}"
    elif kind == "max":
        m = float(np.mean([r[metric] for r in per_cell[spec["cell"]]]))
        passed = m <= spec["value"]
        desc = f"{spec['cell']} mean {metric} {m:.4f} <= {spec['value']}"
    elif kind == "all_equal":
        vals = [r.get(metric) for r in per_cell[spec["cell"]]]
        passed = all(v == spec["value"] for v in vals)
        desc = f"{spec['cell']} {metric} == {spec['value']} for every seed"
    else:
        raise ValueError(f"unknown assertion type {kind!r}")
    return {"type": kind, "description": desc, "passed": bool(passed),
            "enforced": spec.get("enforced", True)}


def run_suite(grid, out_dir=None):
    """Run every cell x seed, summarize per cell and evaluate assertions.

    A failed run is recorded and the suite continues.
    """
    rows, failures = [], []
    per_cell = {c: [] for c in grid.cells}
    for cell in grid.cells:
        for seed in grid.seeds:
            cfg = grid.config(cell, seed)
            try:
                res = train(cfg)
            except Exception as exc:  # noqa: BLE001 - recorded, suite continues
                log.error("run %s failed: %s", cfg.name, exc)
                failures.append((cell, seed, repr(exc)))
                rows.append({"cell": cell, "seed": seed, "status": "failed"})
                continue
            row = {"cell": cell, "seed": seed, "status": "ok", **res.metrics}
            rows.append(row)
            per_cell[cell].append(row)
            if out_dir:
                write_run(res, os.path.join(out_dir, cell, f"seed{seed}"))
    summary = {}
    for cell, runs in per_cell.items():
        summary[cell] = {}
        for metric in SUMMARY_METRICS:
            vals = [r[metric] for r in runs if metric in r]
            if vals:
                summary[cell][metric] = _mean_std(vals)
    checks = []
    for spec in grid.assertions:
        try:
            checks.append(evaluate_assertion(spec, per_cell))
        except (KeyError, ZeroDivisionError) as exc:
            checks.append({"type": spec.get("type"), "description": f"not evaluable: {exc!r}",
                           "passed": False, "enforced": True})
    result = SuiteResult(rows, summary, checks, failures)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(summary_csv(result))
    return result


def summary_csv(result):
    """Per-seed rows then one mean/std row per cell."""
    cols = ["cell", "seed", "status"]
    for m in SUMMARY_METRICS:
        cols += [m, f"{m}_std"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)

    def fmt(v):
        return "" if v is None else repr(float(v))

    for r in result.rows:
        w.writerow([r["cell"], r["seed"], r["status"]]
                   + [x for m in SUMMARY_METRICS for x in (fmt(r.get(m)), "")])
    for cell, stats in result.summary.items():
        vals = []
        for m in SUMMARY_METRICS:
            mean, std = stats.get(m, (None, None))
            vals += [fmt(mean), fmt(std)]
        w.writerow([cell, "mean", "summary"] + vals)
    return buf.getvalue()
