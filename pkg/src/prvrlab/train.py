"""Training loop: video-grouped batches, Adam, per-epoch evaluation, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .config import RunConfig
from .data import Dataset, load_checkpoint, load_manifest, gen_synthetic, save_checkpoint
from .encoders import EncoderConfig, EncoderParams, init_encoder
from .losses import TrainBatch, total_loss
from .merging import MergeConfig, op_tome
from .retrieval import evaluate
from .rng import SplitMix64

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "base", "tcpl_e", "tcpl_a", "cbva", "total"]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_finite_step: int):
        super().__init__(f"non-finite loss at step {step}; last finite step {last_finite_step}")
        self.step = step
        self.last_finite_step = last_finite_step


class Adam:
    def __init__(self, params, lr=2.5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def prepare_clips(dataset: Dataset, merge: MergeConfig) -> list:
    """Order-preserving merge of every video's raw frames (done once, no gradients)."""
    return [op_tome(v.frames, merge.merge_rate, merge.clip_target) for v in dataset.videos]


def video_batches(dataset: Dataset, batch_size: int, rng: SplitMix64) -> list:
    """Shuffle videos, then fill each batch with whole videos' queries up to ``batch_size``."""
    by_video = {}
    for i, q in enumerate(dataset.queries):
        by_video.setdefault(q.video_id, []).append(i)
    vids = [v.video_id for v in dataset.videos if v.video_id in by_video]
    batches, cur = [], []
    for j in rng.permutation(len(vids)):
        qs = by_video[vids[j]]
        if cur and len(cur) + len(qs) > batch_size:
            batches.append(cur)
            cur = []
        cur = cur + qs
    if cur:
        batches.append(cur)
    return batches


def make_batch(dataset: Dataset, clips: list, query_idx, dtype=np.float64) -> TrainBatch:
    vindex = dataset.video_index()
    queries = [dataset.queries[i] for i in query_idx]
    order, pairing = {}, []
    for q in queries:
        vi = vindex[q.video_id]
        if vi not in order:
            order[vi] = len(order)
        pairing.append(order[vi])
    vrows = list(order)
    Lq = max(len(q.words) for q in queries)
    words = np.zeros((len(queries), Lq, dataset.d_q), dtype=dtype)
    for i, q in enumerate(queries):
        words[i, :len(q.words)] = q.words
    Lf = max(len(dataset.videos[v].frames) for v in vrows)
    frames = np.zeros((len(vrows), Lf, dataset.d_v), dtype=dtype)
    for i, v in enumerate(vrows):
        f = dataset.videos[v].frames
        frames[i, :len(f)] = f
    return TrainBatch(
        words=words,
        word_lengths=np.array([len(q.words) for q in queries]),
        teacher=np.stack([q.teacher_eos for q in queries]).astype(np.float64),
        pairing=np.array(pairing),
        frames=frames,
        frame_lengths=np.array([len(dataset.videos[v].frames) for v in vrows]),
        clips=[clips[v] for v in vrows],
    )


def encoder_config_for(cfg: RunConfig, train_ds: Dataset, eval_ds: Dataset | None = None) -> EncoderConfig:
    sets = [train_ds] + ([eval_ds] if eval_ds is not None else [])
    max_words = max(len(q.words) for ds in sets for q in ds.queries)
    max_frames = max(len(v.frames) for ds in sets for v in ds.videos)
    return cfg.encoder(train_ds.d_q, train_ds.d_v, max_words, max_frames)


def save_model(path, params: EncoderParams, extra: dict | None = None) -> None:
    meta = {"encoder": params.config.__dict__, **(extra or {})}
    sections = {f"param/{k}": v for k, v in params.state().items()}
    sections["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    save_checkpoint(path, sections)


def load_model(path) -> tuple:
    """``(params, meta)`` from a checkpoint written by :func:`save_model`."""
    s = load_checkpoint(path)
    meta = json.loads(s.pop("meta").tobytes().decode("utf-8"))
    config = EncoderConfig(**meta["encoder"])
    state = {k[len("param/"):]: v for k, v in s.items() if k.startswith("param/")}
    return EncoderParams.from_state(config, state, requires_grad=False), meta


def load_datasets(cfg: RunConfig) -> tuple:
    d = cfg.raw["data"]
    if d["train_manifest"]:
        train_ds = load_manifest(d["train_manifest"])
        eval_ds = load_manifest(d["eval_manifest"]) if d["eval_manifest"] else None
    else:
        syn = cfg.synth
        train_ds = gen_synthetic(syn)
        eval_ds = gen_synthetic(synth_eval(cfg))
    return train_ds, eval_ds


def synth_eval(cfg: RunConfig):
    from dataclasses import replace
    d = cfg.raw["data"]
    return replace(cfg.synth, seed=cfg.synth.seed + d["eval_seed_offset"], n_videos=d["eval_videos"], split="eval")


@dataclass
class TrainResult:
    params: EncoderParams
    history: list
    evals: list
    best_sum_r: float
    best_epoch: int
    checkpoint: Path | None = None
    loss_csv: Path | None = None
    seconds: float = 0.0
    extras: dict = field(default_factory=dict)


def train(cfg: RunConfig, train_ds: Dataset | None = None, eval_ds: Dataset | None = None,
          out_dir=None) -> TrainResult:
    """Optimize the total objective; keep the parameters with the best eval SumR."""
    t0 = time.perf_counter()
    if train_ds is None:
        train_ds, eval_ds = load_datasets(cfg)
    eval_ds = eval_ds if eval_ds is not None else train_ds
    tc = cfg.train
    dtype = np.float64 if tc["dtype"] == "float64" else np.float32
    merge, weights = cfg.merge, cfg.loss
    w_frame, w_clip = cfg.fusion

    enc_cfg = encoder_config_for(cfg, train_ds, eval_ds)
    params = init_encoder(enc_cfg, seed=tc["seed"])
    if dtype != np.float64:
        params = params.astype(dtype)
    opt = Adam(params.values(), **cfg.optim)
    rng = SplitMix64(tc["seed"]).spawn(0xBA7C)

    train_clips = prepare_clips(train_ds, merge)
    eval_clips = prepare_clips(eval_ds, merge)

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_manifest.json").write_text(cfg.to_json() + "\n", encoding="utf-8")

    history, evals = [], []
    best = (-1.0, 0, params.copy())
    step, last_finite = 0, 0
    for epoch in range(1, tc["epochs"] + 1):
        for qidx in video_batches(train_ds, tc["batch_size"], rng):
            batch = make_batch(train_ds, train_clips, qidx, dtype)
            opt.zero_grad()
            try:
                lb = total_loss(batch, params, weights, merge, seed=tc["seed"] * 100003 + step)
                ag.backward(lb.total)
            except ag.NonFiniteError:
                raise TrainingDiverged(step + 1, last_finite) from None
            for p in params.values():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise TrainingDiverged(step + 1, last_finite)
            opt.step()
            step += 1
            last_finite = step
            history.append({"step": step, **lb.row()})
        if epoch % tc["eval_every"] == 0 or epoch == tc["epochs"]:
            report, _, _ = evaluate(params, eval_ds, merge, w_frame, w_clip, clip_seqs=eval_clips)
            evals.append({"epoch": epoch, "sum_r": report.sum_r, **{f"r{q}": v for q, v in report.recall.items()}})
            log.info("epoch %d step %d total %.4f SumR %.2f", epoch, step, history[-1]["total"], report.sum_r)
            if report.sum_r > best[0]:
                best = (report.sum_r, epoch, params.copy())

    result = TrainResult(best[2], history, evals, best[0], best[1], seconds=time.perf_counter() - t0)
    result.extras["final_params"] = params
    if out:
        result.loss_csv = out / "loss.csv"
        write_loss_csv(result.loss_csv, history)
        with open(out / "eval.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(evals[0]))
            w.writeheader()
            w.writerows(evals)
        result.checkpoint = out / "best.ckpt"
        save_model(result.checkpoint, best[2], {"best_epoch": best[1], "best_sum_r": best[0],
                                                "merge": cfg.raw["merge"], "fusion": cfg.raw["fusion"]})
    return result


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: (row[k] if k == "step" else repr(float(row[k]))) for k in LOSS_COLUMNS})
