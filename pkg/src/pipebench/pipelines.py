"""Training regimes: chained stages, end-to-end composite, and the CNN baseline."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import connector as cn
from .errors import DivergenceError, PipebenchError
from .evalreport import EvalResult, evaluate, summarize
from .models import (
    ChainedModel,
    CnnSpec,
    CompositeModel,
    CompositeSpec,
    CoordCNN,
    DigitTransformer,
    SymbolicStage,
    TransformerSpec,
    images_to_input,
    load_checkpoint,
    save_checkpoint,
    spec_to_dict,
)
from .scenegen import DatasetConfig, Manifest, SampleRecord, coordinate_manifest, load_images

log = logging.getLogger(__name__)

STAGES = ("cnn", "transformer", "composite", "baseline")
REGIMES = ("cnn", "transformer", "chained", "composite", "baseline")
SATURATION_FLOOR = 1e-12
LOG_EVERY = 50

_INIT_LOCK = threading.Lock()


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    steps: int = 0  # when 0, the budget is ``epochs`` passes over the training split
    epochs: float = 1.0
    seed: int = 0
    n_train: int = 0  # 0 uses the whole split
    n_eval: int = 0
    n_test: int = 0
    decimals: int = 3
    cnn_outputs: int = 6
    eval_every: int = 0  # 0 evaluates only at the end
    noise: bool = False
    tau: float = cn.DEFAULT_TAU
    coord_samples: int = 0  # transformer stage: train on this many coordinate-only scenes
    d_model: int = 128
    heads: int = 4
    layers: int = 4
    ff: int = 512
    keep_best: bool = False  # restore the weights with the best eval-split score at the end
    warmup_steps: int = 0  # linear learning-rate ramp from zero
    lr_decay: str = "none"  # "none" or "cosine" (to zero at the last step)
    grad_clip: float = 0.0  # global gradient-norm cap; 0 disables

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.steps < 0 or self.epochs < 0 or (self.steps == 0 and self.epochs == 0):
            raise ValueError("training budget must be positive")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError("lr_decay must be 'none' or 'cosine'")
        if self.warmup_steps < 0 or self.grad_clip < 0:
            raise ValueError("warmup_steps and grad_clip must be non-negative")

    def total_steps(self, n: int) -> int:
        if self.steps:
            return self.steps
        return max(1, math.ceil(self.epochs * n / self.batch_size))

    def lr_factor(self, step: int, total: int) -> float:
        """Multiplier on ``learning_rate`` at ``step`` of ``total``."""
        f = min(1.0, (step + 1) / self.warmup_steps) if self.warmup_steps else 1.0
        if self.lr_decay == "cosine":
            f *= 0.5 * (1.0 + math.cos(math.pi * step / total))
        return f

    def transformer_spec(self, max_len: int) -> TransformerSpec:
        return TransformerSpec(d_model=self.d_model, heads=self.heads, layers=self.layers, ff=self.ff,
                               max_len=max_len)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Per-regime defaults; learning rates, decimals and output counts follow the reference experiments.
DEFAULTS = {
    "cnn": TrainConfig(learning_rate=1e-5, decimals=3, cnn_outputs=6),
    "transformer": TrainConfig(learning_rate=3e-4, decimals=3),
    "composite": TrainConfig(learning_rate=1e-4, decimals=6, cnn_outputs=76, batch_size=16),
    "baseline": TrainConfig(learning_rate=1e-5, cnn_outputs=2),
}


@dataclass(frozen=True)
class LabelCost:
    T: int
    N: int

    def __post_init__(self):
        if self.T < 1 or self.N < 0:
            raise ValueError("label cost needs T >= 1 and N >= 0")

    @property
    def total(self) -> int:
        return self.T * self.N

    @property
    def formula(self) -> str:
        return "T*N" if self.T > 1 else "N"

    def to_dict(self) -> dict:
        return {"T": self.T, "N": self.N, "total": self.total}


@dataclass
class RunRecord:
    run_id: str
    regime: str
    config: dict
    spec: dict
    seed: int
    label_cost: LabelCost
    history: list[dict] = field(default_factory=list)
    final: EvalResult | None = None
    final_metric: float = math.inf
    metric_name: str = "mean_err"
    wall_seconds: float = 0.0
    finished_at: float = 0.0
    artifacts: dict[str, str] = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None
    warnings: list[str] = field(default_factory=list)

    def result_dict(self) -> dict:
        f = self.final
        return {
            "run_id": self.run_id,
            "regime": self.regime,
            "status": self.status,
            "error": self.error,
            "mean_err": None if f is None else f.mean_err,
            "std_err": None if f is None else f.std_err,
            "n": None if f is None else f.n,
            "decode_failures": None if f is None else f.decode_failures,
            "wall_seconds": self.wall_seconds,
            "label_cost": self.label_cost.to_dict(),
            "seed": self.seed,
            "metric_name": self.metric_name,
            "final_metric": None if not math.isfinite(self.final_metric) else self.final_metric,
            "finished_at": self.finished_at,
            "artifacts": self.artifacts,
            "warnings": self.warnings,
        }

    @classmethod
    def from_dir(cls, run_dir: str | Path) -> "RunRecord":
        run_dir = Path(run_dir)
        d = json.loads((run_dir / "result.json").read_text())
        final = None
        if d["mean_err"] is not None:
            final = EvalResult(d["mean_err"], d["std_err"], d["n"], d["decode_failures"])
        history = []
        mpath = run_dir / "metrics.jsonl"
        if mpath.exists():
            history = [json.loads(line) for line in mpath.read_text().splitlines() if line]
        cfg_path = run_dir / "config.json"
        config = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
        lc = d["label_cost"]
        fm = d.get("final_metric")
        return cls(
            run_id=d["run_id"], regime=d["regime"], config=config, spec={}, seed=d["seed"],
            label_cost=LabelCost(lc["T"], lc["N"]), history=history, final=final,
            final_metric=math.inf if fm is None else fm, metric_name=d.get("metric_name", "mean_err"),
            wall_seconds=d["wall_seconds"], finished_at=d.get("finished_at", 0.0),
            artifacts=d.get("artifacts", {}), status=d.get("status", "ok"), error=d.get("error"),
            warnings=d.get("warnings", []),
        )


class RunWriter:
    """Append-only writer for one run directory."""

    def __init__(self, run_dir: str | Path):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def config(self, config: dict) -> None:
        (self.dir / "config.json").write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")

    def metric(self, row: dict) -> None:
        with self._lock, open(self.dir / "metrics.jsonl", "a") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    def checkpoint(self, name: str, kind: str, spec, model) -> str:
        path = self.dir / f"{name}.ckpt"
        save_checkpoint(path, kind, spec, model)
        return path.name

    def result(self, record: RunRecord) -> None:
        (self.dir / "result.json").write_text(json.dumps(record.result_dict(), sort_keys=True, indent=2) + "\n")


class RunStore:
    """One directory per run under ``root``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def new_run(self, regime: str, config: dict, seed: int) -> tuple[str, RunWriter]:
        digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:8]
        base = f"{regime}-s{seed}-{digest}"
        run_id, k = base, 1
        self.root.mkdir(parents=True, exist_ok=True)
        while True:
            try:
                (self.root / run_id).mkdir()
                break
            except FileExistsError:
                k += 1
                run_id = f"{base}-{k}"
        writer = RunWriter(self.root / run_id)
        writer.config(config)
        return run_id, writer

    def runs(self) -> list[RunRecord]:
        if not self.root.exists():
            return []
        return [RunRecord.from_dir(p) for p in sorted(self.root.iterdir()) if (p / "result.json").exists()]


def _head(records: Sequence[SampleRecord], n: int) -> Sequence[SampleRecord]:
    return records[:n] if n else records


def _labels(records: Sequence[SampleRecord], full: bool) -> np.ndarray:
    if full:
        return np.array([r.scene.coordinates() for r in records], dtype=np.float32)
    return np.array([r.scene.target.as_tuple() for r in records], dtype=np.float32)


def match_squares(pred: torch.Tensor, truth: torch.Tensor, n_squares: int = 2) -> torch.Tensor:
    """Rows of ``truth`` with their squares reordered to best fit ``pred``.

    The order of the squares in a label is arbitrary, so the coordinate CNN is
    scored against whichever ordering it is closest to. The triangle stays last.
    """
    k = 2 * n_squares
    perms = list(itertools.permutations(range(n_squares)))
    cands = []
    for perm in perms:
        cols = [c for i in perm for c in (2 * i, 2 * i + 1)] + list(range(k, truth.shape[1]))
        cands.append(truth[:, cols])
    stacked = torch.stack(cands)  # (P, N, V)
    err = ((stacked - pred.detach().unsqueeze(0)) ** 2).sum(-1)
    best = err.argmin(0)
    return stacked[best, torch.arange(truth.shape[0])]


def _images(manifest: Manifest, split: str, n: int) -> np.ndarray:
    imgs = manifest.load_images(split)
    return imgs[:n] if n else imgs


@torch.no_grad()
def cnn_predict(model: CoordCNN, images: np.ndarray, batch: int = 256) -> np.ndarray:
    model.eval()
    out = [model(images_to_input(images[s : s + batch])) for s in range(0, len(images), batch)]
    model.train()
    return torch.cat(out).double().numpy() if out else np.zeros((0, model.spec.outputs))


def coord_rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean over coordinates of each coordinate's RMSE."""
    return float(np.sqrt(((pred - truth) ** 2).mean(axis=0)).mean())


def _init_model(seed: int, build: Callable[[], torch.nn.Module]) -> torch.nn.Module:
    # global RNG is shared between sweep threads
    with _INIT_LOCK:
        torch.manual_seed(seed)
        return build()


def _fit(stage: str, model: torch.nn.Module, cfg: TrainConfig, n: int,
         loss_on: Callable[[torch.Tensor], torch.Tensor],
         on_eval: Callable[[int], dict] | None, writer: RunWriter | None,
         history: list[dict], after_backward: Callable[[int], dict] | None = None) -> None:
    """Adam over shuffled mini-batches with an optional lr schedule; logs to ``history`` and the run's metrics file."""
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    total = cfg.total_steps(n)
    perm, pos = torch.randperm(n, generator=gen), 0
    window: list[float] = []
    best: tuple[float, dict] | None = None
    model.train()
    for step in range(total):
        if pos + cfg.batch_size > n and pos > 0:
            perm, pos = torch.randperm(n, generator=gen), 0
        idx = perm[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        loss = loss_on(idx)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(step, value, stage)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        window.append(value)
        last = step == total - 1
        is_eval = last or (cfg.eval_every and step % cfg.eval_every == 0)
        if step % LOG_EVERY == 0 or is_eval:
            row = {"stage": stage, "step": step, "loss": value, "loss_avg": float(np.mean(window))}
            window = []
            if is_eval and after_backward is not None:
                row.update(after_backward(step))
            if is_eval and on_eval is not None:
                row.update(on_eval(step))
                model.train()
                score = row.get("eval_err", row.get("eval_coord_rmse"))
                if cfg.keep_best and score is not None and (best is None or score < best[0]):
                    best = (score, copy.deepcopy(model.state_dict()))
            history.append(row)
            if writer is not None:
                writer.metric(row)
            log.info("%s step %d/%d loss %.5f", stage, step, total, value)
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        for group in opt.param_groups:
            group["lr"] = cfg.learning_rate * cfg.lr_factor(step, total)
        opt.step()
    if best is not None:
        log.info("%s: restoring weights with eval score %.5f", stage, best[0])
        model.load_state_dict(best[1])


def _record(run_id: str, regime: str, cfg_dict: dict, spec, seed: int, label_cost: LabelCost) -> RunRecord:
    return RunRecord(run_id=run_id, regime=regime, config=cfg_dict,
                     spec=spec_to_dict(spec) if spec is not None else {}, seed=seed, label_cost=label_cost)


def _finish(record: RunRecord, t0: float, writer: RunWriter | None) -> RunRecord:
    record.wall_seconds = time.perf_counter() - t0
    record.finished_at = time.time()
    if writer is not None:
        writer.result(record)
    return record


def _image_shape(manifest: Manifest) -> tuple[int, int]:
    if manifest.image_shape is not None:
        return manifest.image_shape
    return tuple(manifest.load_images("train").shape[1:3])


def _train_cnn(stage: str, cfg: TrainConfig, manifest: Manifest, outputs: int, full_labels: bool,
               writer: RunWriter | None, run_id: str, label_cost: LabelCost) -> tuple[RunRecord, CoordCNN]:
    h, w = _image_shape(manifest)
    spec = CnnSpec(height=h, width=w, outputs=outputs)
    train_imgs = _images(manifest, "train", cfg.n_train)
    y = torch.from_numpy(_labels(_head(manifest.train, cfg.n_train), full_labels))
    eval_recs = _head(manifest.eval, cfg.n_eval)
    eval_imgs = _images(manifest, "eval", cfg.n_eval)
    model = _init_model(cfg.seed, lambda: CoordCNN(spec))
    record = _record(run_id, stage, cfg.to_dict(), spec, cfg.seed, label_cost)

    def loss_on(idx):
        x = images_to_input(train_imgs[idx.numpy()])
        pred = model(x)
        target = match_squares(pred, y[idx]) if full_labels else y[idx]
        return ((pred - target) ** 2).mean()

    def matched(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
        return match_squares(torch.from_numpy(pred), torch.from_numpy(truth)).numpy()

    def on_eval(step):
        pred = cnn_predict(model, eval_imgs)
        if full_labels:
            return {"eval_coord_rmse": coord_rmse(pred, matched(pred, _labels(eval_recs, True)))}
        res = evaluate(lambda recs: [tuple(p) for p in pred], eval_recs)
        return {"eval_err": res.mean_err}

    _fit(stage, model, cfg, len(train_imgs), loss_on, on_eval, writer, record.history)
    test_recs = _head(manifest.test, cfg.n_test)
    pred = cnn_predict(model, _images(manifest, "test", cfg.n_test))
    if full_labels:
        truth = matched(pred, _labels(test_recs, True))
        record.final = summarize(np.sqrt(((pred - truth) ** 2).mean(axis=1)))
        record.final_metric, record.metric_name = coord_rmse(pred, truth), "coord_rmse"
    else:
        record.final = evaluate(lambda recs: [tuple(p) for p in pred], test_recs)
        record.final_metric = record.final.mean_err
    if writer is not None:
        record.artifacts["cnn"] = writer.checkpoint("cnn", "cnn", spec, model)
    return record, model


def train_cnn_stage(cfg: TrainConfig, manifest: Manifest, writer: RunWriter | None = None,
                    run_id: str = "cnn", write_result: bool = True) -> tuple[RunRecord, CoordCNN]:
    """CNN regressing all square and triangle coordinates (first chained stage)."""
    t0 = time.perf_counter()
    record, model = _train_cnn("cnn", cfg, manifest, 6, True, writer, run_id, LabelCost(1, len(manifest.train)))
    return _finish(record, t0, writer if write_result else None), model


def train_baseline_cnn(cfg: TrainConfig, manifest: Manifest, writer: RunWriter | None = None,
                       run_id: str = "baseline") -> tuple[RunRecord, CoordCNN]:
    """CNN regressing the target point directly; the output count is always 2."""
    t0 = time.perf_counter()
    cfg = dataclasses.replace(cfg, cnn_outputs=2)
    record, model = _train_cnn("baseline", cfg, manifest, 2, False, writer, run_id,
                               LabelCost(1, len(manifest.train)))
    return _finish(record, t0, writer), model


def coordinate_training_set(ds: DatasetConfig, n_train: int, n_eval: int = 1000, n_test: int = 1000) -> Manifest:
    """Coordinate-only scenes from a separate RNG stream of the dataset's seed."""
    cfg = dataclasses.replace(ds, n_samples=n_train + n_eval + n_test, n_eval=n_eval, n_test=n_test,
                              stream=ds.stream + 1)
    return coordinate_manifest(cfg)


def _context_values(records: Sequence[SampleRecord]) -> np.ndarray:
    return np.array([r.scene.coordinates() for r in records], dtype=np.float64)


def train_transformer_stage(cfg: TrainConfig, manifest: Manifest, writer: RunWriter | None = None,
                            run_id: str = "transformer", write_result: bool = True,
                            label_n: int | None = None) -> tuple[RunRecord, DigitTransformer]:
    """Transformer mapping ground-truth coordinates to the nearest square's coordinates."""
    t0 = time.perf_counter()
    d = cfg.decimals
    train = _head(manifest.train, cfg.n_train)
    ctx = _context_values(train)
    tgt = _labels(train, False).astype(np.float64)
    spec = cfg.transformer_spec(cn.sequence_length(ctx.shape[1], d))
    model = _init_model(cfg.seed, lambda: DigitTransformer(spec))
    stage = SymbolicStage(model, d)
    ids_all = torch.from_numpy(cn.encode_batch(ctx, tgt, d))
    noise_gen = np.random.default_rng(cfg.seed + 2)
    eval_recs = _head(manifest.eval, cfg.n_eval)
    record = _record(run_id, "transformer", cfg.to_dict(), spec, cfg.seed,
                     LabelCost(1, len(manifest.train) if label_n is None else label_n))

    def loss_on(idx):
        if cfg.noise:
            half = 0.5 * 10.0**-d
            jitter = noise_gen.uniform(-half, half, size=(len(idx), ctx.shape[1]))
            ids = torch.from_numpy(cn.encode_batch(ctx[idx.numpy()] + jitter, tgt[idx.numpy()], d))
        else:
            ids = ids_all[idx]
        return stage.loss(ids)

    def on_eval(step):
        res = evaluate(lambda recs: stage.predict_values(_context_values(recs)), eval_recs)
        return {"eval_err": res.mean_err, "decode_failures": res.decode_failures}

    _fit("transformer", model, cfg, len(train), loss_on, on_eval, writer, record.history)
    record.final = evaluate(lambda recs: stage.predict_values(_context_values(recs)), _head(manifest.test, cfg.n_test))
    record.final_metric = record.final.mean_err
    if writer is not None:
        record.artifacts["transformer"] = writer.checkpoint("transformer", "transformer", spec, model)
    return _finish(record, t0, writer if write_result else None), model


def _tagged(stage: str, fn):
    try:
        return fn()
    except DivergenceError:
        raise  # already names its stage
    except PipebenchError as e:
        raise type(e)(f"{stage} stage: {e}") from e
    except Exception as e:
        raise RuntimeError(f"{stage} stage failed: {e}") from e


def chained_predictor(cnn: CoordCNN, transformer: DigitTransformer, decimals: int, root) -> Callable:
    chain = ChainedModel(cnn, transformer, decimals)

    def predict(records):
        return chain.predict_images(images_to_input(load_images(records, root)))

    return predict


def train_chained(cnn_cfg: TrainConfig, tr_cfg: TrainConfig, manifest: Manifest,
                  coords: Manifest | None = None, writer: RunWriter | None = None, run_id: str = "chained",
                  cnn_stage: tuple[RunRecord, CoordCNN] | None = None,
                  transformer_stage: tuple[RunRecord, DigitTransformer] | None = None,
                  parallel: bool = False) -> tuple[RunRecord, ChainedModel]:
    """Train (or reuse) the two stages independently, then score the chain on the test split.

    The transformer stage trains on ``coords`` when given, otherwise on the image
    manifest's coordinates. Wall time is the sum of both stages plus evaluation.
    """
    t0 = time.perf_counter()
    n_labels = len(manifest.train)
    tr_manifest = coords if coords is not None else manifest

    def run_cnn():
        return _tagged("cnn", lambda: train_cnn_stage(cnn_cfg, manifest, writer, f"{run_id}/cnn",
                                                     write_result=False))

    def run_tr():
        return _tagged("transformer", lambda: train_transformer_stage(
            tr_cfg, tr_manifest, writer, f"{run_id}/transformer", write_result=False, label_n=n_labels))

    todo = {k: f for k, f, have in (("cnn", run_cnn, cnn_stage), ("transformer", run_tr, transformer_stage))
            if have is None}
    done = {}
    if parallel and len(todo) == 2:
        with ThreadPoolExecutor(max_workers=2) as pool:
            futs = {k: pool.submit(f) for k, f in todo.items()}
            done = {k: fut.result() for k, fut in futs.items()}
    else:
        done = {k: f() for k, f in todo.items()}
    cnn_rec, cnn = cnn_stage if cnn_stage is not None else done["cnn"]
    tr_rec, tr = transformer_stage if transformer_stage is not None else done["transformer"]

    config = {"cnn": cnn_cfg.to_dict(), "transformer": tr_cfg.to_dict()}
    record = RunRecord(run_id=run_id, regime="chained", config=config,
                       spec={"cnn": cnn_rec.spec, "transformer": tr_rec.spec}, seed=cnn_cfg.seed,
                       label_cost=LabelCost(2, n_labels))
    record.history = [*cnn_rec.history, *tr_rec.history]
    eval_t0 = time.perf_counter()
    predict = chained_predictor(cnn, tr, tr_cfg.decimals, manifest.root)
    record.final = evaluate(predict, _head(manifest.test, cnn_cfg.n_test))
    record.final_metric = record.final.mean_err
    if writer is not None:
        for rec in (cnn_rec, tr_rec):
            record.artifacts.update(rec.artifacts)
        if "cnn" not in record.artifacts:
            record.artifacts["cnn"] = writer.checkpoint("cnn", "cnn", cnn.spec, cnn)
        if "transformer" not in record.artifacts:
            record.artifacts["transformer"] = writer.checkpoint("transformer", "transformer", tr.spec, tr)
    record.wall_seconds = cnn_rec.wall_seconds + tr_rec.wall_seconds + (time.perf_counter() - eval_t0)
    record.finished_at = time.time()
    if writer is not None:
        writer.result(record)
    log.info("chained run %s finished in %.1fs (stage training %.1fs, this call %.1fs)", run_id,
             record.wall_seconds, cnn_rec.wall_seconds + tr_rec.wall_seconds, time.perf_counter() - t0)
    return record, ChainedModel(cnn, tr, tr_cfg.decimals)


def composite_predictor(model: CompositeModel, root, batch: int = 32) -> Callable:
    def predict(records):
        model.eval()
        out = []
        for s in range(0, len(records), batch):
            pts, _ = model.predict(images_to_input(load_images(records[s : s + batch], root)))
            out.extend(pts)
        model.train()
        return out

    return predict


def target_ids(records: Sequence[SampleRecord], decimals: int) -> torch.Tensor:
    """Target-slot token ids ``(N, 2D+1)`` for the records' nearest squares."""
    tgt = _labels(records, False).astype(np.float64)
    ids = cn.encode_batch(tgt, None, decimals)
    return torch.from_numpy(ids)


def train_composite(cfg: TrainConfig, manifest: Manifest, writer: RunWriter | None = None,
                    run_id: str = "composite") -> tuple[RunRecord, CompositeModel]:
    """End-to-end CNN + transformer trained only on the nearest-square label."""
    t0 = time.perf_counter()
    h, w = _image_shape(manifest)
    spec = CompositeSpec(
        cnn=CnnSpec(height=h, width=w, outputs=cfg.cnn_outputs),
        format=cn.FormatSpec(decimals=cfg.decimals),
        transformer=cfg.transformer_spec(cn.sequence_length(cfg.cnn_outputs, cfg.decimals)),
        tau=cfg.tau,
    )
    model = _init_model(cfg.seed, lambda: CompositeModel(spec))
    train_imgs = _images(manifest, "train", cfg.n_train)
    tids = target_ids(_head(manifest.train, cfg.n_train), cfg.decimals)
    eval_recs = _head(manifest.eval, cfg.n_eval)
    record = _record(run_id, "composite", cfg.to_dict(), spec, cfg.seed, LabelCost(1, len(manifest.train)))
    quiet = [0]

    def loss_on(idx):
        x = images_to_input(train_imgs[idx.numpy()])
        t = tids[idx]
        return torch.nn.functional.cross_entropy(model(x, t).reshape(-1, spec.transformer.vocab_size), t.reshape(-1))

    def probe(step):
        g = model.cnn.first_conv.weight.grad
        value = 0.0 if g is None else float(g.abs().max())
        quiet[0] = quiet[0] + 1 if value < SATURATION_FLOOR else 0
        if quiet[0] >= 3:
            msg = f"connector gradient saturated: first-conv probe < {SATURATION_FLOOR} for {quiet[0]} evals"
            log.warning(msg)
            record.warnings.append(f"step {step}: {msg}")
        return {"grad_probe": value}

    predict = composite_predictor(model, manifest.root)

    def on_eval(step):
        res = evaluate(predict, eval_recs)
        return {"eval_err": res.mean_err, "decode_failures": res.decode_failures}

    _fit("composite", model, cfg, len(train_imgs), loss_on, on_eval, writer, record.history, after_backward=probe)
    record.final = evaluate(predict, _head(manifest.test, cfg.n_test))
    record.final_metric = record.final.mean_err
    if writer is not None:
        record.artifacts["composite"] = writer.checkpoint("composite", "composite", spec, model)
    return _finish(record, t0, writer), model


def load_run_model(run_dir: str | Path, kind: str):
    return load_checkpoint(Path(run_dir) / f"{kind}.ckpt", kind)


def run_regime(regime: str, cfg: TrainConfig | tuple[TrainConfig, TrainConfig], manifest: Manifest,
               writer: RunWriter | None = None, run_id: str | None = None, coords: Manifest | None = None):
    """Dispatch one training run; chained takes a (cnn, transformer) config pair."""
    run_id = run_id or regime
    if regime == "cnn":
        return train_cnn_stage(cfg, manifest, writer, run_id)
    if regime == "transformer":
        return train_transformer_stage(cfg, coords if coords is not None else manifest, writer, run_id)
    if regime == "chained":
        cnn_cfg, tr_cfg = cfg
        return train_chained(cnn_cfg, tr_cfg, manifest, coords, writer, run_id)
    if regime == "composite":
        return train_composite(cfg, manifest, writer, run_id)
    if regime == "baseline":
        return train_baseline_cnn(cfg, manifest, writer, run_id)
    raise ValueError(f"unknown regime {regime!r}")


def expand_grid(grid: dict[str, Sequence], max_runs: int | None = None, seed: int = 0) -> list[dict]:
    """Cartesian product of the grid in sorted-key order, optionally subsampled."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("sweep grid must name at least one hyperparameter with candidate values")
    keys = sorted(grid)
    combos = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    if max_runs is not None and max_runs < len(combos):
        pick = np.random.default_rng(seed).choice(len(combos), size=max_runs, replace=False)
        combos = [combos[i] for i in sorted(pick)]
    return combos


def _apply(cfg, combo: dict):
    if isinstance(cfg, tuple):
        cnn_cfg, tr_cfg = cfg
        cnn_kw = {k.split(".", 1)[1] if "." in k else k: v for k, v in combo.items()
                  if not k.startswith("transformer.")}
        tr_kw = {k.split(".", 1)[1] if "." in k else k: v for k, v in combo.items() if not k.startswith("cnn.")}
        return dataclasses.replace(cnn_cfg, **cnn_kw), dataclasses.replace(tr_cfg, **tr_kw)
    return dataclasses.replace(cfg, **combo)


def sweep(grid: dict[str, Sequence], regime: str, base: TrainConfig | tuple[TrainConfig, TrainConfig],
          manifest: Manifest, store: RunStore | None = None, cap: int = 64, workers: int = 1,
          serial: bool = False, max_runs: int | None = None, coords: Manifest | None = None,
          seed: int = 0) -> list[RunRecord]:
    """Run every grid point and return records sorted by final metric (failures last).

    Individual failures are recorded on their RunRecord and do not stop the sweep.
    """
    combos = expand_grid(grid, max_runs, seed)
    if len(combos) > cap:
        raise ValueError(f"sweep has {len(combos)} runs, above the cap of {cap}")
    configs = [_apply(base, c) for c in combos]

    def one(i: int) -> RunRecord:
        cfg = configs[i]
        cfg_dict = ({"cnn": cfg[0].to_dict(), "transformer": cfg[1].to_dict()} if isinstance(cfg, tuple)
                    else cfg.to_dict())
        cfg_dict["sweep_point"] = combos[i]
        run_seed = cfg[0].seed if isinstance(cfg, tuple) else cfg.seed
        run_id, writer = (store.new_run(regime, cfg_dict, run_seed) if store is not None
                          else (f"{regime}-{i}", None))
        try:
            record, _ = run_regime(regime, cfg, manifest, writer, run_id, coords)
        except Exception as e:  # a failed point must not sink the sweep
            log.error("sweep run %s failed: %s", run_id, e)
            record = RunRecord(run_id=run_id, regime=regime, config=cfg_dict, spec={}, seed=run_seed,
                               label_cost=LabelCost(2 if regime == "chained" else 1, len(manifest.train)),
                               status="failed", error=f"{type(e).__name__}: {e}", finished_at=time.time())
            if writer is not None:
                writer.result(record)
        record.config = {**record.config, "sweep_point": combos[i]}
        return record

    if serial or workers <= 1:
        records = [one(i) for i in range(len(configs))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, range(len(configs))))
    order = sorted(range(len(records)), key=lambda i: (records[i].status != "ok", records[i].final_metric, i))
    return [records[i] for i in order]
