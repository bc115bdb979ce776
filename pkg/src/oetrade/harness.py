"""Experiment driver: pretrain, freeze, score and sample outliers, fine-tune, evaluate, aggregate."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import losses
from . import metrics as M
from . import model as model_mod
from . import sampling
from .augment import multi_batch_transform
from .config import ExperimentConfig, Flags
from .errors import ConfigError, DivergenceError, PreconditionError

log = logging.getLogger(__name__)

AGGREGATE_COLUMNS = ("method", "row", "seed", "ACC", "FPR", "AUC", "AP")


@dataclass
class TaskData:
    id_train: data_mod.Dataset
    id_test: data_mod.Dataset
    pool: data_mod.Dataset
    ood_tests: list[data_mod.Dataset]

    @property
    def feature_std(self) -> float:
        return float(self.id_train.inputs.std(axis=0).mean())


def build_data(cfg: ExperimentConfig) -> TaskData:
    d = cfg.data
    return TaskData(
        id_train=data_mod.gen_id(d.id_train),
        id_test=data_mod.gen_id(d.id_test),
        pool=data_mod.gen_outlier_pool(d.outlier_pool),
        ood_tests=data_mod.gen_ood_testsets(list(d.ood_tests)),
    )


# ---------------------------------------------------------------------------
# optimisation


class SGD:
    """SGD with heavy-ball momentum, L2 weight decay and optional global gradient-norm clipping."""

    def __init__(self, params: list[ad.Tensor], momentum: float, weight_decay: float, grad_clip: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        scale = 1.0
        if self.grad_clip > 0:
            norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params if p.grad is not None))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for p, v in zip(self.params, self.velocity):
            g = np.zeros_like(p.data) if p.grad is None else p.grad * scale
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data -= lr * v
            p.grad = None


def learning_rate(base: float, schedule: str, step: int, total: int) -> float:
    if schedule == "constant" or total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _check_finite(value: float, phase: str, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{phase}: non-finite loss at epoch {epoch}, step {step}")


def _model_dims(cfg: ExperimentConfig) -> model_mod.Dims:
    spec = cfg.data.id_train
    return model_mod.Dims(spec.input_dim, cfg.model.feature_dim, cfg.model.embedding_dim, spec.classes)


def pretrain(cfg: ExperimentConfig, seed: int, id_train: data_mod.Dataset) -> model_mod.ModelParams:
    """Classification-only training from scratch; the result is the frozen teacher."""
    params = model_mod.init(_model_dims(cfg), cfg.model.hidden, seed=seed)
    opt_cfg = cfg.optimizer
    rng = np.random.default_rng([seed, 1])
    n = len(id_train)
    steps_per_epoch = math.ceil(n / opt_cfg.batch_in)
    total = opt_cfg.epochs_pretrain * steps_per_epoch
    opt = SGD(params.parameters(), opt_cfg.momentum, opt_cfg.weight_decay, opt_cfg.grad_clip)
    t = 0
    for epoch in range(opt_cfg.epochs_pretrain):
        order = rng.permutation(n)
        for start in range(0, n, opt_cfg.batch_in):
            idx = order[start : start + opt_cfg.batch_in]
            out = model_mod.forward(params, id_train.inputs[idx], embed=False)
            loss = losses.classification_loss(out.logits, id_train.labels[idx])
            _check_finite(loss.item(), "pretrain", epoch, t)
            ad.backward(loss)
            opt.step(learning_rate(opt_cfg.pretrain_lr, opt_cfg.schedule, t, total))
            t += 1
    params.lineage.append(f"pretrain:{seed}:{opt_cfg.epochs_pretrain}")
    return params


def _cycle_batches(n: int, batch: int, rng: np.random.Generator):
    """Endless without-replacement mini-batches, reshuffled after each full pass."""
    batch = min(batch, n)
    order, pos = rng.permutation(n), 0
    while True:
        if pos + batch > n:
            order, pos = rng.permutation(n), 0
        yield order[pos : pos + batch]
        pos += batch


def effective_weights(cfg: ExperimentConfig, flags: Flags) -> losses.LossWeights:
    return cfg.loss.weights(
        kd=cfg.loss.kd if flags.use_kd else 0.0,
        sc=cfg.loss.sc if flags.use_oscl else 0.0,
    )


def finetune(
    teacher: model_mod.ModelParams,
    outliers: np.ndarray,
    id_train: data_mod.Dataset,
    cfg: ExperimentConfig,
    seed: int,
    flags: Flags | None = None,
    weights: losses.LossWeights | None = None,
    feature_std: float | None = None,
) -> tuple[model_mod.ModelParams, list[dict]]:
    """Fine-tune a copy of ``teacher`` on the weighted objective; returns (student, epoch log).

    The teacher is never modified. Classification, OE and KD terms use the
    raw batches; only the contrastive term sees the n-fold augmented batch.
    """
    flags = cfg.flags if flags is None else flags
    weights = effective_weights(cfg, flags) if weights is None else weights
    outliers = np.asarray(outliers, dtype=np.float64).reshape(-1, id_train.dim)
    needs_outliers = weights.reg > 0 or (weights.sc > 0 and cfg.transform.apply_to_outliers)
    if weights.reg > 0 and len(outliers) == 0:
        raise ConfigError("outlier regularization is on but the sampled outlier set is empty")
    use_out = needs_outliers and len(outliers) > 0

    student = teacher.copy()
    student.lineage.append(f"finetune:{seed}")
    opt_cfg = cfg.optimizer
    rng = np.random.default_rng([seed, 2])
    aug_rng = np.random.default_rng([seed, 3])
    out_batches = _cycle_batches(len(outliers), opt_cfg.batch_out, np.random.default_rng([seed, 4])) if use_out else None
    tspec = cfg.transform.spec(id_train.inputs.std(axis=0).mean() if feature_std is None else feature_std, seed)

    n = len(id_train)
    steps_per_epoch = math.ceil(n / opt_cfg.batch_in)
    total = opt_cfg.epochs_finetune * steps_per_epoch
    opt = SGD(student.parameters(), opt_cfg.momentum, opt_cfg.weight_decay, opt_cfg.grad_clip)
    history: list[dict] = []
    t = 0
    for epoch in range(opt_cfg.epochs_finetune):
        rows = []
        order = rng.permutation(n)
        for start in range(0, n, opt_cfg.batch_in):
            idx = order[start : start + opt_cfg.batch_in]
            x_in, y_in = id_train.inputs[idx], id_train.labels[idx]
            x_out = outliers[next(out_batches)] if use_out else np.zeros((0, id_train.dim))

            out_in = model_mod.forward(student, x_in, embed=False)
            l_cls = losses.classification_loss(out_in.logits, y_in)
            l_reg = l_kd = l_sc = 0.0
            if weights.reg > 0:
                l_reg = losses.oe_uniform_loss(model_mod.forward(student, x_out, embed=False).logits)
            if weights.kd > 0:
                if cfg.loss.kd_on_outliers and len(x_out):
                    x_kd = np.concatenate([x_in, x_out])
                    s_logits = model_mod.forward(student, x_kd, embed=False).logits
                else:
                    x_kd, s_logits = x_in, out_in.logits
                l_kd = losses.kd_loss(s_logits, model_mod.predict_logits(teacher, x_kd), weights.t_kd)
            if weights.sc > 0:
                l_sc = _contrastive_term(student, x_in, y_in, x_out, cfg, tspec, weights, aug_rng)

            total_loss, breakdown = losses.total_loss(l_cls, l_reg, l_kd, l_sc, weights)
            _check_finite(breakdown.total, "finetune", epoch, t)
            ad.backward(total_loss)
            opt.step(learning_rate(opt_cfg.lr, opt_cfg.schedule, t, total))
            rows.append(breakdown.as_dict())
            t += 1
        entry = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
        entry["epoch"] = epoch
        entry["lr"] = learning_rate(opt_cfg.lr, opt_cfg.schedule, t - 1, total)
        history.append(entry)
    return student, history


def _contrastive_term(student, x_in, y_in, x_out, cfg, tspec, weights, rng) -> ad.Tensor:
    with_out = cfg.transform.apply_to_outliers and len(x_out) > 0
    x = np.concatenate([x_in, x_out]) if with_out else x_in
    is_out = np.r_[np.zeros(len(x_in), bool), np.ones(len(x) - len(x_in), bool)]
    labels = np.r_[y_in, np.full(len(x) - len(x_in), -1)]
    xm, ym, fm = multi_batch_transform(x, labels, tspec, rng=rng, flags=is_out)
    in_rows, out_rows = np.flatnonzero(~fm), np.flatnonzero(fm)
    n_in = len(in_rows)
    emb = model_mod.forward(student, np.concatenate([xm[in_rows], xm[out_rows]])).embedding
    emb_out = emb[n_in:] if len(out_rows) else None
    return losses.oscl_loss(emb[:n_in], ym[in_rows], emb_out, weights.tau_sc, cfg.loss.sc_reduction)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    report: M.MetricsReport
    score_sets: dict[str, M.ScoreSet]


def evaluate(
    params: model_mod.ModelParams,
    id_test: data_mod.Dataset,
    ood_tests: list[data_mod.Dataset],
    score: str = "msp",
    seed: int | None = None,
    aupr_positive: str = "id",
) -> Evaluation:
    if id_test is None or not ood_tests:
        raise PreconditionError("evaluation needs an ID test set and at least one OOD test set")
    if score not in M.SCORERS:
        raise ConfigError(f"unknown score {score!r}")
    scorer = M.SCORERS[score]
    id_logits = model_mod.predict_logits(params, id_test.inputs)
    if not np.isfinite(id_logits).all():
        raise PreconditionError("model produced non-finite logits")
    acc = M.accuracy(id_logits.argmax(axis=1), id_test.labels)
    id_scores = scorer(id_logits)
    per_set, sets = {}, {}
    for ds in ood_tests:
        ss = M.ScoreSet(id_scores, scorer(model_mod.predict_logits(params, ds.inputs)))
        per_set[ds.name] = M.ood_metrics(ss, aupr_positive)
        sets[ds.name] = ss
    return Evaluation(M.MetricsReport(acc=acc, per_set=per_set, seed=seed, score=score), sets)


# ---------------------------------------------------------------------------
# ladder and runs


def method_setup(cfg: ExperimentConfig, method: str) -> tuple[Flags, losses.LossWeights]:
    """Flags and weights for one rung of the ablation ladder.

    ``ce`` fine-tunes on classification alone; ``oe`` uses the baseline
    regularization weight; every other rung uses the configured weights with
    the named factors switched on.
    """
    on = {
        "ce": Flags(False, False, False),
        "oe": Flags(False, False, False),
        "oe+kd": Flags(True, False, False),
        "oe+sampling": Flags(False, True, False),
        "oe+oscl": Flags(False, False, True),
        "oe+all": Flags(True, True, True),
    }
    if method == "custom":
        return cfg.flags, effective_weights(cfg, cfg.flags)
    if method not in on:
        raise ConfigError(f"unknown method {method!r}")
    flags = on[method]
    if method == "ce":
        return flags, cfg.loss.weights(reg=0.0, kd=0.0, sc=0.0)
    if method == "oe":
        return flags, cfg.loss.weights(reg=cfg.loss.baseline_reg, kd=0.0, sc=0.0)
    return flags, effective_weights(cfg, flags)


def sampled_outliers(
    cfg: ExperimentConfig, scored: sampling.ScoredPool, flags: Flags, seed: int, plan: sampling.SamplePlan | None = None
) -> np.ndarray:
    plan = plan or cfg.sampling.plan()
    if flags.use_sampling:
        return sampling.select(scored, plan)[0]
    return scored.samples[sampling.random_subset(len(scored), plan.m, seed)]


@dataclass
class RunRecord:
    config_hash: str
    methods: list[str]
    seeds: list[int]
    reports: dict[str, dict[int, M.MetricsReport]] = field(default_factory=dict)
    logs: dict[str, dict[int, list[dict]]] = field(default_factory=dict)
    checkpoints: dict[str, dict[int, str]] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    teacher_checksums: dict[int, tuple[str, str]] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return bool(self.failures)

    def aggregate(self, method: str) -> tuple[dict[str, float], dict[str, float]]:
        rows = [self.reports[method][s].row() for s in sorted(self.reports[method])]
        return M.aggregate(rows)

    def to_dict(self) -> dict:
        agg = {}
        for m in self.methods:
            if self.reports.get(m):
                mean, std = self.aggregate(m)
                agg[m] = {"mean": mean, "std": std, "n": len(self.reports[m])}
        return {
            "config_hash": self.config_hash,
            "methods": self.methods,
            "seeds": self.seeds,
            "reports": {m: {str(s): r.to_dict() for s, r in sorted(rs.items())} for m, rs in self.reports.items()},
            "logs": {m: {str(s): lg for s, lg in sorted(ls.items())} for m, ls in self.logs.items()},
            "checkpoints": {m: {str(s): c for s, c in sorted(cs.items())} for m, cs in self.checkpoints.items()},
            "aggregate": agg,
            "failures": self.failures,
            "failed": self.failed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        rec = cls(d["config_hash"], list(d["methods"]), [int(s) for s in d["seeds"]])
        rec.reports = {m: {int(s): M.MetricsReport.from_dict(r) for s, r in rs.items()} for m, rs in d["reports"].items()}
        rec.logs = {m: {int(s): lg for s, lg in ls.items()} for m, ls in d.get("logs", {}).items()}
        rec.checkpoints = {m: {int(s): c for s, c in cs.items()} for m, cs in d.get("checkpoints", {}).items()}
        rec.failures = dict(d.get("failures", {}))
        return rec

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def run_seed(cfg: ExperimentConfig, seed: int, methods: list[str], task: TaskData | None = None) -> dict:
    """All ladder rungs for one seed, sharing a single teacher and one scoring pass."""
    task = task or build_data(cfg)
    teacher = pretrain(cfg, seed, task.id_train)
    before = teacher.checksum()
    scored = sampling.score_pool(teacher, task.pool.inputs, pool_id=task.pool.provenance)
    result = {"reports": {}, "logs": {}, "checkpoints": {}, "evaluations": {}, "students": {}}
    for method in methods:
        flags, weights = method_setup(cfg, method)
        outliers = sampled_outliers(cfg, scored, flags, seed) if weights.reg > 0 or weights.sc > 0 else np.zeros((0, task.id_train.dim))
        student, history = finetune(teacher, outliers, task.id_train, cfg, seed, flags, weights, task.feature_std)
        ev = evaluate(student, task.id_test, task.ood_tests, cfg.score, seed, cfg.aupr_positive)
        result["reports"][method] = ev.report
        result["logs"][method] = history
        result["checkpoints"][method] = student.checksum()
        result["evaluations"][method] = ev
        result["students"][method] = student
    result["teacher"] = teacher
    result["teacher_checksums"] = (before, teacher.checksum())
    return result


def run_experiment(cfg: ExperimentConfig, out_dir=None, methods: list[str] | None = None,
                   write_curves: bool = False) -> RunRecord:
    methods = list(methods or cfg.ladder or ["custom"])
    record = RunRecord(cfg.hash(), methods, list(cfg.seeds))
    for m in methods:
        record.reports[m], record.logs[m], record.checkpoints[m] = {}, {}, {}
    task = build_data(cfg)
    out = Path(out_dir) if out_dir is not None else None
    for seed in cfg.seeds:
        try:
            res = run_seed(cfg, seed, methods, task)
        except Exception as exc:  # one seed failing must not lose the others
            log.exception("seed %s failed", seed)
            record.failures[str(seed)] = f"{type(exc).__name__}: {exc}"
            continue
        record.teacher_checksums[seed] = res["teacher_checksums"]
        for m in methods:
            record.reports[m][seed] = res["reports"][m]
            record.logs[m][seed] = res["logs"][m]
            record.checkpoints[m][seed] = res["checkpoints"][m]
            if out is not None:
                sd = out / "seeds" / _slug(m)
                sd.mkdir(parents=True, exist_ok=True)
                (sd / f"seed-{seed}.json").write_text(json.dumps(res["reports"][m].to_dict(), indent=2, sort_keys=True))
                model_mod.save(res["students"][m], sd / f"seed-{seed}-checkpoint.json")
                if write_curves:
                    cd = out / "curves" / _slug(m) / f"seed-{seed}"
                    cd.mkdir(parents=True, exist_ok=True)
                    for name, ss in res["evaluations"][m].score_sets.items():
                        M.write_roc_csv(cd / f"{name}.csv", ss)
        log.info("seed %s done", seed)
    if out is not None:
        write_run(record, out)
    return record


def _slug(method: str) -> str:
    return method.replace("+", "_")


def write_run(record: RunRecord, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "record.json").write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True))
    (out / "aggregate.csv").write_text(aggregate_csv(record))


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def aggregate_csv(record: RunRecord) -> str:
    """One row per (method, seed) plus mean and std rows, columns ACC, FPR, AUC, AP."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_COLUMNS)
    for m in record.methods:
        reps = record.reports.get(m, {})
        for s in sorted(reps):
            r = reps[s].row()
            w.writerow([m, "seed", s, *(_fmt(r[k]) for k in M.METRIC_COLUMNS)])
        if reps:
            mean, std = record.aggregate(m)
            w.writerow([m, "mean", "", *(_fmt(mean[k]) for k in M.METRIC_COLUMNS)])
            w.writerow([m, "std", "", *(_fmt(std[k]) for k in M.METRIC_COLUMNS)])
    return buf.getvalue()


def load_run(run_dir) -> RunRecord:
    return RunRecord.from_dict(json.loads((Path(run_dir) / "record.json").read_text()))


# ---------------------------------------------------------------------------
# sampling grid


GRID_COLUMNS = ("q", "step", "ACC", "FPR95", "AUROC")


@dataclass
class GridResult:
    rows: list[dict]
    best: tuple[float, int]
    skipped: list[tuple[float, int]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for r in self.rows:
            w.writerow([f"{r['q']:.2f}", r["step"], _fmt(r["acc"]), _fmt(r["fpr95"]), _fmt(r["auroc"])])
        return buf.getvalue()


def pick_best(rows: list[dict]) -> tuple[float, int]:
    """Highest average AUROC; ties go to the lower q, then the smaller step."""
    best = min(rows, key=lambda r: (-r["auroc"], r["q"], r["step"]))
    return best["q"], best["step"]


def grid_search_sampling(
    cfg: ExperimentConfig,
    q_grid=sampling.Q_GRID,
    step_grid=sampling.STEP_GRID,
    seed: int | None = None,
    task: TaskData | None = None,
    teacher: model_mod.ModelParams | None = None,
    scored: sampling.ScoredPool | None = None,
) -> GridResult:
    """Sweep (q, step) with every other setting fixed, reusing one scored pool.

    Runs the configured method flags with hardness sampling forced on, on a
    single seed (the first configured one unless given).
    """
    seed = cfg.seeds[0] if seed is None else seed
    task = task or build_data(cfg)
    if scored is None:
        teacher = teacher or pretrain(cfg, seed, task.id_train)
        scored = sampling.score_pool(teacher, task.pool.inputs, pool_id=task.pool.provenance)
    elif teacher is None:
        raise PreconditionError("a cached scored pool needs its teacher")
    flags = replace(cfg.flags, use_sampling=True)
    weights = effective_weights(cfg, flags)
    rows, skipped = [], []
    for q in q_grid:
        for step in step_grid:
            plan = sampling.SamplePlan(float(q), int(step), cfg.sampling.m)
            if not plan.fits(len(scored)):
                log.warning("skipping q=%s step=%s: plan exceeds pool of %d", q, step, len(scored))
                skipped.append((float(q), int(step)))
                continue
            outliers = sampling.select(scored, plan)[0]
            student, _ = finetune(teacher, outliers, task.id_train, cfg, seed, flags, weights, task.feature_std)
            rep = evaluate(student, task.id_test, task.ood_tests, cfg.score, seed, cfg.aupr_positive).report
            rows.append({"q": float(q), "step": int(step), "acc": rep.acc, **rep.average})
    if not rows:
        raise PreconditionError("no grid point fits the outlier pool")
    return GridResult(rows, pick_best(rows), skipped)
