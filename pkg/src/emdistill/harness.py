"""Experiment engine: synthetic tasks, teacher training, distillation runs.

A run is fully determined by one flat key/value config file plus a seed.
Outputs: a teacher checkpoint, line-delimited metrics records, per-epoch
averaged flow/cost matrices as CSV, and a JSON run report.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .distill import (
    LayerWeights,
    Projections,
    cost_attention_update,
    total_loss,
)
from .model import (
    ActivationTrace,
    SgdMomentum,
    TransformerConfig,
    TransformerModel,
    evaluate,
)
from .tensor import Tensor
from .transport import TransportInputError

TASK_KINDS = ("majority-token", "contains-subsequence", "balanced-parentheses")
CLS_TOKEN = 0
FIRST_CONTENT_TOKEN = 2

METRIC_FIELDS = (
    "epoch", "split", "step", "loss_total", "loss_emb", "loss_pred",
    "loss_attn", "loss_hidden", "eval_acc", "weights_attn_teacher",
    "weights_hidden_teacher", "weights_attn_student", "weights_hidden_student",
)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (exit code 2)."""


class NumericFailure(RuntimeError):
    """NaN/inf encountered during optimization (exit code 3)."""


class AccuracyFloorError(RuntimeError):
    """Teacher failed to reach the configured accuracy floor (exit code 4)."""


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "majority-token"
    vocab_size: int = 12
    seq_len: int = 10  # includes the leading CLS position
    num_classes: int = 2
    train_size: int = 256
    eval_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind == "majority-token":
            if self.vocab_size < FIRST_CONTENT_TOKEN + self.num_classes:
                raise ConfigError(
                    f"vocab_size {self.vocab_size} too small for "
                    f"{self.num_classes}-class majority-token"
                )
        else:
            if self.num_classes != 2:
                raise ConfigError(f"{self.kind} is a binary task")
            if self.vocab_size < FIRST_CONTENT_TOKEN + 2:
                raise ConfigError(f"vocab_size {self.vocab_size} too small")
            if self.kind == "balanced-parentheses" and self.seq_len % 2 == 0:
                # content length (seq_len - 1) must be even to balance
                raise ConfigError("balanced-parentheses needs an odd seq_len")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be at least 2 (CLS + content)")


def task_label(spec: SyntheticTaskSpec, tokens) -> int:
    """Rule-based label for a full sequence (CLS at position 0)."""
    content = np.asarray(tokens)[1:]
    if spec.kind == "majority-token":
        counts = np.bincount(
            (content - FIRST_CONTENT_TOKEN) % spec.num_classes,
            minlength=spec.num_classes,
        )
        return int(np.argmax(counts))  # ties resolve to the lowest class
    if spec.kind == "contains-subsequence":
        pat = [FIRST_CONTENT_TOKEN, FIRST_CONTENT_TOKEN + 1]
        hay = content.tolist()
        for i in range(len(hay) - 1):
            if hay[i : i + 2] == pat:
                return 1
        return 0
    # balanced-parentheses over tokens 2 = "(" and 3 = ")"
    depth = 0
    for tok in content:
        depth += 1 if tok == FIRST_CONTENT_TOKEN else -1
        if depth < 0:
            return 0
    return int(depth == 0)


def _sample_sequence(spec: SyntheticTaskSpec, rng) -> np.ndarray:
    n = spec.seq_len - 1
    if spec.kind == "balanced-parentheses":
        content = rng.integers(FIRST_CONTENT_TOKEN, FIRST_CONTENT_TOKEN + 2, size=n)
    else:
        content = rng.integers(FIRST_CONTENT_TOKEN, spec.vocab_size, size=n)
    return np.concatenate([[CLS_TOKEN], content])


def generate_task(spec: SyntheticTaskSpec):
    """Deterministic (train, eval) datasets of (tokens, label) pairs.

    Classes are balanced within +-1 per split by rejection sampling; the
    eval split rejects any sequence that appears in train.
    """
    rng = np.random.default_rng(spec.seed)
    seen: set[tuple] = set()

    def build(size, forbid):
        per_class = [size // spec.num_classes] * spec.num_classes
        for c in range(size % spec.num_classes):
            per_class[c] += 1
        data = []
        for c, want in enumerate(per_class):
            got = 0
            attempts = 0
            while got < want:
                attempts += 1
                if attempts > 200000:
                    raise ConfigError(
                        f"could not sample class {c} for task {spec.kind!r}"
                    )
                tokens = _sample_sequence(spec, rng)
                key = tuple(tokens.tolist())
                if key in forbid or key in seen:
                    continue
                if task_label(spec, tokens) != c:
                    continue
                seen.add(key)
                data.append((tokens, c))
                got += 1
        order = rng.permutation(len(data))
        return [data[i] for i in order]

    train = build(spec.train_size, forbid=set())
    eval_ = build(spec.eval_size, forbid={tuple(t.tolist()) for t, _ in train})
    return train, eval_


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DistillConfig:
    teacher: TransformerConfig
    student: TransformerConfig
    task: SyntheticTaskSpec
    beta: float = 0.01
    t: float = 1.0
    tau: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    mode: str = "full"
    seed: int = 0
    output_dir: str = "runs/default"
    teacher_learning_rate: float = 0.05
    teacher_epochs: int = 20
    accuracy_floor: float = 0.95
    teacher_checkpoint: str = ""

    def __post_init__(self):
        if self.teacher.num_layers < self.student.num_layers:
            raise ConfigError("teacher must have at least as many layers as student")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in ("full", "no_emd", "no_ca", "one_to_one"):
            raise ConfigError(f"unknown mode {self.mode!r}")


_MODEL_KEYS = {
    "num_layers": int, "num_heads": int, "hidden_size": int, "ff_size": int,
    "vocab_size": int, "max_seq_len": int, "num_classes": int, "seed": int,
    "init_std": float,
}
_TASK_KEYS = {
    "kind": str, "vocab_size": int, "seq_len": int, "num_classes": int,
    "train_size": int, "eval_size": int, "seed": int,
}
_TOP_KEYS = {
    "beta": float, "t": float, "tau": float, "learning_rate": float,
    "batch_size": int, "epochs": int, "mode": str, "seed": int,
    "output_dir": str, "teacher_learning_rate": float, "teacher_epochs": int,
    "accuracy_floor": float, "teacher_checkpoint": str,
}


def parse_config_text(text: str) -> dict:
    """Parse flat dotted-key config text into a nested dict of strings."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def load_config(path, overrides: dict | None = None) -> DistillConfig:
    try:
        with open(path) as fh:
            flat = parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    flat.update(overrides or {})

    sections: dict[str, dict] = {"teacher": {}, "student": {}, "task": {}, "": {}}
    for key, value in flat.items():
        if "." in key:
            section, sub = key.split(".", 1)
        else:
            section, sub = "", key
        if section not in sections:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
        sections[section][sub] = value

    def coerce(values, schema, where):
        out = {}
        for k, v in values.items():
            if k not in schema:
                raise ConfigError(f"unknown config key {where}{k!r}")
            try:
                out[k] = schema[k](v)
            except ValueError as exc:
                raise ConfigError(f"bad value for {where}{k}: {v!r}") from exc
        return out

    def model_cfg(values, fallbacks):
        merged = dict(fallbacks)
        merged.update(coerce(values, _MODEL_KEYS, ""))
        missing = set(_MODEL_KEYS) - set(merged) - {"seed", "init_std"}
        if missing:
            raise ConfigError(f"missing model keys: {sorted(missing)}")
        merged.setdefault("seed", 0)
        try:
            return TransformerConfig(**merged)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    task = SyntheticTaskSpec(**coerce(sections["task"], _TASK_KEYS, "task."))
    # models default vocab/seq/classes from the task
    shared = {
        "vocab_size": task.vocab_size,
        "max_seq_len": task.seq_len,
        "num_classes": task.num_classes,
    }
    teacher = model_cfg(sections["teacher"], shared)
    student = model_cfg(sections["student"], shared)
    top = coerce(sections[""], _TOP_KEYS, "")
    return DistillConfig(teacher=teacher, student=student, task=task, **top)


# ---------------------------------------------------------------------------
# run report and serialization helpers


@dataclass
class RunReport:
    mode: str
    records: list = field(default_factory=list)
    exports: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(x) -> str:
    if isinstance(x, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return "null"
    return repr(float(x))


def metrics_line(record: dict) -> str:
    parts = [f'"{k}": {_fmt(record[k])}' for k in METRIC_FIELDS]
    return "{" + ", ".join(parts) + "}"


def write_matrix_csv(path, matrix_teacher_by_student: np.ndarray):
    """CSV with teacher layers as columns and student layers as rows.

    Input is the internal M x N orientation (teacher rows); the file
    stores its transpose with 1-based index headers.
    """
    m, n = matrix_teacher_by_student.shape
    grid = matrix_teacher_by_student.T  # N rows (student) x M cols (teacher)
    with open(path, "w") as fh:
        fh.write("," + ",".join(str(i + 1) for i in range(m)) + "\n")
        for j in range(n):
            cells = ",".join(repr(float(v)) for v in grid[j])
            fh.write(f"{j + 1},{cells}\n")


# ---------------------------------------------------------------------------
# teacher training


def train_teacher(config: DistillConfig, out_dir) -> str:
    """Train the teacher on the synthetic task; returns the checkpoint path.

    Raises AccuracyFloorError when the configured eval-accuracy floor is
    not reached within teacher_epochs.
    """
    os.makedirs(out_dir, exist_ok=True)
    train, eval_ = generate_task(config.task)
    model = TransformerModel(config.teacher)
    opt = SgdMomentum(model.parameters(), config.teacher_learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    accuracy = 0.0
    for epoch in range(1, config.teacher_epochs + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            losses = []
            for k in idx:
                tokens, label = train[k]
                logits, _ = model.forward(tokens)
                losses.append(model.cross_entropy(logits, label))
            total = losses[0]
            for lo in losses[1:]:
                total = T.add(total, lo)
            mean_loss = T.scale(total, 1.0 / len(losses))
            if not np.isfinite(mean_loss.item()):
                raise NumericFailure(f"teacher loss is not finite at epoch {epoch}")
            T.backward(mean_loss)
            opt.step()
        accuracy = evaluate(model, eval_)
        if accuracy >= config.accuracy_floor:
            break
    path = os.path.join(out_dir, "teacher.npz")
    model.save(path)
    if accuracy < config.accuracy_floor:
        raise AccuracyFloorError(
            f"teacher reached {accuracy:.3f} after {config.teacher_epochs} epochs, "
            f"below the floor {config.accuracy_floor}"
        )
    return path


# ---------------------------------------------------------------------------
# distillation


def _detach_trace(trace: ActivationTrace) -> ActivationTrace:
    return ActivationTrace(
        embeddings=Tensor(trace.embeddings.data.copy()),
        attention_scores=[Tensor(a.data.copy()) for a in trace.attention_scores],
        hidden_states=[Tensor(h.data.copy()) for h in trace.hidden_states],
        logits=Tensor(trace.logits.data.copy()),
    )


class _TeacherCache:
    """Frozen-teacher traces, computed once per distinct sequence."""

    def __init__(self, model: TransformerModel):
        self.model = model
        self._cache: dict[tuple, ActivationTrace] = {}

    def trace(self, tokens) -> ActivationTrace:
        key = tuple(np.asarray(tokens).tolist())
        if key not in self._cache:
            _, tr = self.model.forward(tokens)
            self._cache[key] = _detach_trace(tr)
        return self._cache[key]


def _weights_record(w: LayerWeights) -> dict:
    return {
        "weights_attn_teacher": [float(v) for v in w.attn_teacher],
        "weights_hidden_teacher": [float(v) for v in w.hidden_teacher],
        "weights_attn_student": [float(v) for v in w.attn_student],
        "weights_hidden_student": [float(v) for v in w.hidden_student],
    }


def _split_losses(student, teacher_cache, proj, weights, config, dataset):
    """Batch-averaged loss breakdown over a dataset, without updates."""
    sums = dict(total=0.0, emb=0.0, pred=0.0, attn=0.0, hidden=0.0)
    batches = 0
    for start in range(0, len(dataset), config.batch_size):
        chunk = dataset[start : start + config.batch_size]
        s_traces = [student.forward(tokens)[1] for tokens, _ in chunk]
        t_traces = [teacher_cache.trace(tokens) for tokens, _ in chunk]
        out = total_loss(
            s_traces, t_traces, proj, weights, config.beta, config.t,
            tau=config.tau, mode=config.mode,
        )
        for key in sums:
            sums[key] += getattr(out, key).item()
        batches += 1
    return {k: v / batches for k, v in sums.items()}


def distill(config: DistillConfig, teacher_checkpoint, out_dir) -> RunReport:
    """Run the distillation loop and emit metrics, matrices and a report."""
    os.makedirs(out_dir, exist_ok=True)
    teacher = TransformerModel.load(teacher_checkpoint)
    if teacher.config != config.teacher:
        raise ConfigError(
            "teacher checkpoint configuration does not match config.teacher"
        )
    train, eval_ = generate_task(config.task)
    student = TransformerModel(config.student)
    proj = Projections(
        config.student.hidden_size, config.teacher.hidden_size,
        seed=config.student.seed,
    )
    opt = SgdMomentum(
        student.parameters() + proj.parameters(), config.learning_rate
    )
    weights = LayerWeights.uniform(
        config.teacher.num_layers, config.student.num_layers
    )
    cache = _TeacherCache(teacher)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    report = RunReport(mode=config.mode)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    step = 0
    with open(metrics_path, "w") as metrics:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train))
            sums = dict(total=0.0, emb=0.0, pred=0.0, attn=0.0, hidden=0.0)
            mat_sums = {}
            mat_counts = 0
            batches = 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                chunk = [train[k] for k in idx]
                s_traces = [student.forward(tokens)[1] for tokens, _ in chunk]
                t_traces = [cache.trace(tokens) for tokens, _ in chunk]
                def _abort(reason):
                    dump = os.path.join(out_dir, "last_good_student.npz")
                    student.save(dump)
                    return NumericFailure(
                        f"{reason} at epoch {epoch} step {step}; "
                        f"last good student saved to {dump}"
                    )

                try:
                    out = total_loss(
                        s_traces, t_traces, proj, weights, config.beta,
                        config.t, tau=config.tau, mode=config.mode,
                    )
                except TransportInputError as exc:
                    raise _abort(f"non-finite activations ({exc})") from exc
                value = out.total.item()
                if not np.isfinite(value):
                    raise _abort("loss became non-finite")
                T.backward(out.total)
                opt.step()
                step += 1
                batches += 1
                for key in sums:
                    sums[key] += getattr(out, key).item()
                if out.attn_flow is not None:
                    mats = {
                        "attn_flow": out.attn_flow.flow,
                        "attn_cost": out.attn_cost,
                        "hidden_flow": out.hidden_flow.flow,
                        "hidden_cost": out.hidden_cost,
                    }
                    for name, mat in mats.items():
                        mat_sums[name] = mat_sums.get(name, 0.0) + mat
                    mat_counts += 1
                    if config.mode == "full":
                        weights = cost_attention_update(
                            out.attn_flow, out.attn_cost,
                            out.hidden_flow, out.hidden_cost,
                            weights, config.tau,
                        )
                elif out.attn_cost is not None:
                    for name, mat in (
                        ("attn_cost", out.attn_cost),
                        ("hidden_cost", out.hidden_cost),
                    ):
                        mat_sums[name] = mat_sums.get(name, 0.0) + mat
                    mat_counts += 1

            train_losses = {k: v / batches for k, v in sums.items()}
            train_acc = evaluate(student, train)
            eval_losses = _split_losses(
                student, cache, proj, weights, config, eval_
            )
            eval_acc = evaluate(student, eval_)
            wrec = _weights_record(weights)
            for split, losses, acc in (
                ("train", train_losses, train_acc),
                ("eval", eval_losses, eval_acc),
            ):
                record = {
                    "epoch": epoch, "split": split, "step": step,
                    "loss_total": losses["total"], "loss_emb": losses["emb"],
                    "loss_pred": losses["pred"], "loss_attn": losses["attn"],
                    "loss_hidden": losses["hidden"], "eval_acc": acc,
                    **wrec,
                }
                metrics.write(metrics_line(record) + "\n")
                report.records.append(record)
            for name, total in sorted(mat_sums.items()):
                kind, what = name.split("_")
                fname = f"epoch{epoch}_{kind}_{what}.csv"
                write_matrix_csv(os.path.join(out_dir, fname), total / mat_counts)
                report.exports.append(fname)

    student_path = os.path.join(out_dir, "student.npz")
    student.save(student_path)
    final = report.records[-1]
    report.summary = {
        "final_eval_acc": final["eval_acc"],
        "final_total_loss": final["loss_total"],
        "epochs": config.epochs,
        "steps": step,
        "student_checkpoint": "student.npz",
        "metrics": "metrics.jsonl",
    }
    report.save(os.path.join(out_dir, "report.json"))
    return report


def ablate(config: DistillConfig, teacher_checkpoint, out_dir) -> dict:
    """Run all four modes with identical seeds; emit a comparison report."""
    os.makedirs(out_dir, exist_ok=True)
    modes = ("full", "no_emd", "no_ca", "one_to_one")
    rows = []
    for mode in modes:
        sub_cfg = DistillConfig(**{**asdict_config(config), "mode": mode})
        sub_dir = os.path.join(out_dir, mode)
        report = distill(sub_cfg, teacher_checkpoint, sub_dir)
        eval_records = [r for r in report.records if r["split"] == "eval"]
        rows.append(
            {
                "mode": mode,
                "final_eval_acc": report.summary["final_eval_acc"],
                "final_total_loss": report.summary["final_total_loss"],
                "loss_curve": [r["loss_total"] for r in eval_records],
                "run_dir": mode,
            }
        )
    ordering = [r["mode"] for r in sorted(
        rows, key=lambda r: (-r["final_eval_acc"], r["mode"])
    )]
    comparison = {"rows": rows, "accuracy_ordering": ordering}
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        json.dump(comparison, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "ablation.txt"), "w") as fh:
        fh.write(f"{'mode':<12} {'eval_acc':>9} {'total_loss':>12}\n")
        for r in rows:
            fh.write(
                f"{r['mode']:<12} {r['final_eval_acc']:>9.4f} "
                f"{r['final_total_loss']:>12.6f}\n"
            )
        fh.write("ordering by eval accuracy: " + " >= ".join(ordering) + "\n")
    return comparison


def asdict_config(config: DistillConfig) -> dict:
    d = asdict(config)
    d["teacher"] = config.teacher
    d["student"] = config.student
    d["task"] = config.task
    return d


def export_matrices(config: DistillConfig, teacher_checkpoint, student_checkpoint,
                    out_dir) -> list[str]:
    """One eval-set pass with uniform weights; exports epoch1 matrices."""
    os.makedirs(out_dir, exist_ok=True)
    teacher = TransformerModel.load(teacher_checkpoint)
    student = TransformerModel.load(student_checkpoint)
    proj = Projections(
        config.student.hidden_size, config.teacher.hidden_size,
        seed=config.student.seed,
    )
    weights = LayerWeights.uniform(
        config.teacher.num_layers, config.student.num_layers
    )
    cache = _TeacherCache(teacher)
    _, eval_ = generate_task(config.task)
    sums = {}
    count = 0
    for start in range(0, len(eval_), config.batch_size):
        chunk = eval_[start : start + config.batch_size]
        s_traces = [student.forward(tokens)[1] for tokens, _ in chunk]
        t_traces = [cache.trace(tokens) for tokens, _ in chunk]
        out = total_loss(
            s_traces, t_traces, proj, weights, config.beta, config.t,
            tau=config.tau, mode="full",
        )
        for name, mat in (
            ("attn_flow", out.attn_flow.flow),
            ("attn_cost", out.attn_cost),
            ("hidden_flow", out.hidden_flow.flow),
            ("hidden_cost", out.hidden_cost),
        ):
            sums[name] = sums.get(name, 0.0) + mat
        count += 1
    paths = []
    for name, total in sorted(sums.items()):
        kind, what = name.split("_")
        fname = f"epoch1_{kind}_{what}.csv"
        write_matrix_csv(os.path.join(out_dir, fname), total / count)
        paths.append(fname)
    return paths
