"""End-to-end runs: data generation, pretraining, fine-tuning, sampling, evaluation.

Every function here is deterministic given its config and seeds. Files
that carry wall-clock data are limited to ``summary.json``.

Output layout under ``out_dir``::

    data/<tag>/<tag>_<k>.vol, data/manifest.json
    pretrain/{checkpoint.tvoo, loss.csv, loss.png, summary.json}
    finetune/{checkpoint.tvoo, loss.csv, loss.png, summary.json}
    samples/{sample_<seed>.vol, slices.png, manifest.json}
    eval/{report.json, report.csv}
    ablation/{ablation.csv, ablation.png, summary.json}
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from . import ddpm
from .adapters import (
    AdapterKind,
    ConvKernelDims,
    formula_param_count,
    state_from_topology,
    topology_to_dict,
)
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import ExperimentConfig, load_schema
from .data import (
    TAGS,
    generate_phantom,
    make_split,
    read_volume,
    to_model_range,
    from_model_range,
    VolumeRecord,
    write_volume,
)
from .metrics import evaluate
from .nn import UNetLite, attach_adapters
from .nn.layers import Conv3d, Linear
from .optim import make_optimizer
from . import plotting

__all__ = [
    "RunError",
    "volume_seed",
    "gen_data",
    "build_model",
    "build_schedule",
    "TrainState",
    "save_state",
    "load_state",
    "train_loop",
    "pretrain",
    "finetune",
    "sample_volumes",
    "eval_dirs",
    "ablate_rank",
    "param_count_table",
    "inspect_checkpoint",
    "expected_adapter_count",
]

log = logging.getLogger(__name__)
CKPT_NAME = "checkpoint.tvoo"


class RunError(RuntimeError):
    pass


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- data

def volume_seed(data_seed: int, tag: str, k: int) -> int:
    """Per-volume seed: data seed in the high 32 bits, tag index and counter below."""
    return (int(data_seed) << 32) | (TAGS.index(tag) << 24) | int(k)


def gen_data(cfg: ExperimentConfig, out_dir=None) -> dict:
    out = Path(out_dir) if out_dir is not None else cfg.out_dir / "data"
    entries = []
    for tag in cfg.data["tags"]:
        pc = cfg.phantom(tag)
        tag_dir = out / tag
        tag_dir.mkdir(parents=True, exist_ok=True)
        for k in range(cfg.data["n_per_tag"]):
            seed = volume_seed(cfg.data["seed"], tag, k)
            path = tag_dir / f"{tag}_{k:04d}.vol"
            write_volume(path, generate_phantom(pc, seed))
            entries.append({"path": str(path.relative_to(out)), "tag": tag, "seed": seed})
    manifest = {"grid": cfg.data["grid"], "config_hash": cfg.hash(), "volumes": entries}
    _write_json(out / "manifest.json", manifest)
    return manifest


def load_tag(data_dir, tag: str) -> list[VolumeRecord]:
    data_dir = Path(data_dir)
    mpath = data_dir / "manifest.json"
    if not mpath.exists():
        raise RunError(f"no dataset manifest at {mpath}; run gen-data first")
    manifest = json.loads(mpath.read_text())
    recs = [read_volume(data_dir / e["path"]) for e in manifest["volumes"] if e["tag"] == tag]
    if not recs:
        raise RunError(f"dataset at {data_dir} has no volumes tagged {tag!r}")
    return recs


def split_tag(cfg: ExperimentConfig, data_dir, tag: str):
    recs = load_tag(data_dir, tag)
    return make_split(recs, cfg.data["split_fraction"], cfg.data["seed"])


# ---------------------------------------------------------------- model state

def build_model(cfg: ExperimentConfig) -> UNetLite:
    m = cfg.model
    return UNetLite(widths=tuple(m["widths"]), time_dim=m["time_dim"], groups=m["groups"],
                    blocks_per_level=m["blocks_per_level"], seed=m["seed"], T=cfg.diffusion["T"])


def build_schedule(cfg: ExperimentConfig) -> ddpm.DiffusionSchedule:
    d = cfg.diffusion
    return ddpm.make_schedule(d["T"], d["beta_start"], d["beta_end"], d["schedule"])


def _adapted_layers(model) -> dict:
    out = {}
    for _, mod in model.named_modules():
        if isinstance(mod, (Conv3d, Linear)) and mod.adapter is not None:
            out[mod.weight.name[: -len(".weight")]] = mod
    return out


def _layers_by_name(model) -> dict:
    return {mod.weight.name[: -len(".weight")]: mod for _, mod in model.named_modules()
            if isinstance(mod, (Conv3d, Linear))}


@dataclass
class TrainState:
    cfg: ExperimentConfig
    model: UNetLite
    schedule: ddpm.DiffusionSchedule
    optimizer: object
    rng: np.random.Generator
    step: int = 0
    phase: str = "pretrain"
    attach: dict | None = None


def save_state(path, st: TrainState) -> Path:
    model = st.model
    blobs = {f"model/{k}": p.value for k, p in model.base_parameters().items()}
    adapters = {}
    for lname, layer in _adapted_layers(model).items():
        state = layer.adapter
        adapters[lname] = topology_to_dict(state)
        for core, p in state.params.items():
            blobs[f"adapter/{p.name}"] = p.value
        for core, v in state.frozen_net.cores.items():
            blobs[f"frozen/{lname}/{core}"] = v
    opt_state = st.optimizer.state_dict()
    for k, v in opt_state["m"].items():
        blobs[f"optim/m/{k}"] = v
    for k, v in opt_state["v"].items():
        blobs[f"optim/v/{k}"] = v
    meta = {
        "phase": st.phase,
        "step": st.step,
        "config": st.cfg.raw,
        "config_hash": st.cfg.hash(),
        "schedule": st.schedule.to_dict(),
        "optimizer": {"kind": opt_state["kind"], "lr": opt_state["lr"], "t": opt_state["t"]},
        "rng": st.rng.bit_generator.state,
        "adapters": adapters,
        "trainable": sorted(model.trainable_parameters()),
        "attach": st.attach,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(path, blobs, meta)
    return path


def load_state(path) -> TrainState:
    ck = read_checkpoint(path)
    meta = ck.meta
    cfg = ExperimentConfig(meta["config"])
    model = build_model(cfg)
    base = model.base_parameters()
    stored = ck.section("model")
    if set(stored) != set(base):
        raise CheckpointError(f"{path}: parameter set does not match the configured model")
    for k, p in base.items():
        if stored[k].shape != p.shape:
            raise CheckpointError(f"{path}: {k} has shape {stored[k].shape}, model expects {p.shape}")
        p.value = stored[k]
    layers = _layers_by_name(model)
    adapter_blobs = ck.section("adapter")
    for lname, topo in meta["adapters"].items():
        if lname not in layers:
            raise CheckpointError(f"{path}: adapter for unknown layer {lname!r}")
        cores = {c: adapter_blobs[n] for c, n in topo["param_names"].items()}
        frozen = ck.section(f"frozen/{lname}")
        layers[lname].attach(state_from_topology(topo, cores, frozen))
    trainable = set(meta["trainable"])
    for k, p in model.parameters().items():
        p.trainable = k in trainable
    o = meta["optimizer"]
    optimizer = make_optimizer(o["kind"], o["lr"])
    optimizer.load_state_dict({"t": o["t"], "m": ck.section("optim/m"), "v": ck.section("optim/v")})
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    s = meta["schedule"]
    schedule = ddpm.make_schedule(s["T"], s["beta_start"], s["beta_end"], s["shape"])
    return TrainState(cfg, model, schedule, optimizer, rng, meta["step"], meta["phase"],
                      meta.get("attach"))


# ---------------------------------------------------------------- training

def _model_inputs(records: Sequence[VolumeRecord]) -> list[np.ndarray]:
    return [to_model_range(r.voxels)[None, None] for r in records]


def train_loop(st: TrainState, volumes: Sequence[np.ndarray], steps: int, accumulation: int,
               log_path=None, max_grad_norm=None) -> list[dict]:
    """Run ``steps`` optimizer updates from ``st.step``; append rows to ``log_path``."""
    if not volumes:
        raise RunError("no training volumes")
    params = st.model.trainable_parameters()
    if not params:
        raise RunError("model has no trainable parameters")
    rows = []
    fh = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        new = st.step == 0 or not log_path.exists()
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "loss", "lr", "grad_norm"])
    try:
        for _ in range(steps):
            batch = [volumes[int(st.rng.integers(len(volumes)))] for _ in range(accumulation)]
            try:
                out = ddpm.train_step(st.model, batch, st.schedule, st.rng, st.optimizer, params,
                                      max_grad_norm)
            except ddpm.TrainingError as exc:
                raise RunError(f"{st.phase} step {st.step + 1}: {exc}") from None
            st.step += 1
            row = {"step": st.step, "loss": out["loss"], "lr": st.optimizer.lr,
                   "grad_norm": out["grad_norm"]}
            rows.append(row)
            if fh is not None:
                writer.writerow([row["step"], repr(row["loss"]), repr(row["lr"]), repr(row["grad_norm"])])
                fh.flush()
            if st.step % 25 == 0:
                log.info("%s step %d loss %.5f", st.phase, st.step, out["loss"])
    finally:
        if fh is not None:
            fh.close()
    return rows


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _finish_run(st: TrainState, out: Path, rows_all, t0, extra) -> dict:
    ckpt = save_state(out / CKPT_NAME, st)
    losses = [r["loss"] for r in rows_all]
    plotting.plot_loss([r["step"] for r in rows_all], losses, out / "loss.png",
                       title=f"{st.phase} loss")
    w = min(50, max(1, len(losses) // 4))
    summary = {
        "phase": st.phase,
        "steps": st.step,
        "checkpoint": str(ckpt),
        "loss_first_window": float(np.mean(losses[:w])),
        "loss_last_window": float(np.mean(losses[-w:])),
        "window": w,
        "config_hash": st.cfg.hash(),
        "trainable_params": int(sum(p.value.size for p in st.model.trainable_parameters().values())),
        "total_params": int(sum(p.value.size for p in st.model.parameters().values())),
        **extra,
    }
    # wall time stays out of summary.json so reruns are byte-identical
    _write_json(out / "summary.json", summary)
    wall = time.time() - t0
    log.info("%s finished in %.1f s", st.phase, wall)
    return {**summary, "wall_seconds": wall}


def pretrain(cfg: ExperimentConfig, data_dir=None, out_dir=None, resume=None,
             steps: int | None = None) -> dict:
    """Train the denoiser on the pretrain tag; optionally continue from ``resume``."""
    t0 = time.time()
    data_dir = Path(data_dir) if data_dir else cfg.out_dir / "data"
    out = Path(out_dir) if out_dir else cfg.out_dir / "pretrain"
    tr = cfg.training
    target = steps if steps is not None else tr["pretrain_steps"]
    train, _ = split_tag(cfg, data_dir, cfg.data["pretrain_tag"])
    if resume is not None:
        st = load_state(resume)
        if st.phase != "pretrain":
            raise RunError(f"{resume} is a {st.phase} checkpoint, not a pretrain one")
    else:
        st = TrainState(cfg, build_model(cfg), build_schedule(cfg),
                        make_optimizer(tr["optimizer"], tr["lr"]),
                        np.random.default_rng(tr["seed"]), 0, "pretrain")
    remaining = target - st.step
    if remaining < 0:
        raise RunError(f"checkpoint is already at step {st.step} > {target}")
    train_loop(st, _model_inputs(train), remaining, tr["accumulation_steps"], out / "loss.csv",
               tr["max_grad_norm"])
    return _finish_run(st, out, read_loss_csv(out / "loss.csv"), t0, {})


def _base_bytes(model) -> dict[str, bytes]:
    return {k: np.ascontiguousarray(p.value, dtype="<f8").tobytes()
            for k, p in model.base_parameters().items()}


def expected_adapter_count(model, kind, rank: int) -> int:
    """Closed-form adapter total for the attached layers (convs use ``kind``)."""
    total = 0
    for layer in _adapted_layers(model).values():
        if isinstance(layer, Conv3d):
            total += formula_param_count(kind, ConvKernelDims.from_shape(*layer.weight.shape), rank)
        else:
            total += formula_param_count(AdapterKind.QUANTA_LINEAR, layer.adapter.dims, rank)
    return total


def finetune(cfg: ExperimentConfig, base_ckpt, data_dir=None, out_dir=None, kind=None,
             rank: int | None = None, joint: bool | None = None, steps: int | None = None,
             tag: str | None = None) -> dict:
    """Attach adapters to a pretrained model and train on the shifted tag."""
    t0 = time.time()
    data_dir = Path(data_dir) if data_dir else cfg.out_dir / "data"
    out = Path(out_dir) if out_dir else cfg.out_dir / "finetune"
    a, tr = cfg.adapter, cfg.training
    kind = AdapterKind.parse(kind or a["kind"])
    rank = rank or a["rank"]
    joint = a["joint"] if joint is None else joint
    steps = steps or tr["finetune_steps"]
    tag = tag or cfg.data["finetune_tag"]

    base = load_state(base_ckpt)
    if base.phase != "pretrain" or base.attach:
        raise RunError(f"{base_ckpt} is not a pretrained base checkpoint")
    model = base.model
    report = attach_adapters(model, kind, rank, targets=a["targets"], joint=joint, seed=a["seed"],
                             scaling=a["scaling"], std_exponent=a["std_exponent"])
    before = _base_bytes(model)
    frozen_names = sorted(k for k, p in model.base_parameters().items() if not p.trainable)
    st = TrainState(cfg, model, base.schedule, make_optimizer(tr["optimizer"], tr["finetune_lr"]),
                    np.random.default_rng([tr["seed"], 1]), 0, "finetune",
                    {"kind": kind.value, "rank": rank, "joint": joint, "base": str(base_ckpt),
                     "tag": tag})
    train, _ = split_tag(cfg, data_dir, tag)
    train_loop(st, _model_inputs(train), steps, tr["accumulation_steps"], out / "loss.csv",
               tr["max_grad_norm"])
    after = _base_bytes(model)
    changed = [k for k in frozen_names if before[k] != after[k]]
    if changed:
        raise RunError(f"frozen base weights changed during fine-tuning: {changed[:5]}")
    base_identical = all(before[k] == after[k] for k in before)
    if not joint and not base_identical:
        raise RunError("adapter-mode fine-tuning modified base weights")
    extra = {
        "kind": kind.value, "rank": rank, "joint": joint, "tag": tag,
        "adapter_params": report.adapter_params,
        "adapter_params_formula": expected_adapter_count(model, kind, rank),
        "base_params": report.base_params,
        "trainable_fraction": report.trainable_params / (report.base_params + report.adapter_params),
        "base_weights_identical": base_identical,
    }
    return _finish_run(st, out, read_loss_csv(out / "loss.csv"), t0, extra)


# ---------------------------------------------------------------- sampling and evaluation

def sample_volumes(ckpt, n: int, seed: int, out_dir, merged: bool = False,
                   figure: bool = True) -> list[Path]:
    """Write ``n`` samples with seeds ``seed .. seed + n - 1``."""
    st = load_state(ckpt)
    model = st.model
    model.set_adapter_mode("merged_kernel" if merged else "merge")
    grid = tuple(st.cfg.data["grid"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, vols = [], []
    for s in range(seed, seed + n):
        x = ddpm.sample(model, st.schedule, (1, 1) + grid, s)
        rec = VolumeRecord(from_model_range(x[0, 0]), "generated", s)
        path = out / f"sample_{s:06d}.vol"
        write_volume(path, rec)
        paths.append(path)
        vols.append(rec.voxels)
    _write_json(out / "manifest.json", {
        "checkpoint_config_hash": st.cfg.hash(), "merged": merged,
        "volumes": [{"path": p.name, "seed": s} for p, s in zip(paths, range(seed, seed + n))],
    })
    if figure:
        plotting.plot_slices(vols[:4], out / "slices.png", [f"seed {s}" for s in range(seed, seed + n)][:4])
    return paths


def _read_dir(d) -> list[np.ndarray]:
    d = Path(d)
    files = sorted(d.glob("*.vol"))
    if not files:
        raise RunError(f"no .vol files in {d}")
    vols = [read_volume(f).voxels.astype(np.float64) for f in files]
    shapes = {v.shape for v in vols}
    if len(shapes) != 1:
        raise RunError(f"{d}: volumes have mixed shapes {sorted(shapes)}")
    return vols


def eval_dirs(real_dir, gen_dir, out_dir, protocol: str = "pairwise", encoder_seed: int = 0,
              max_pairs: int = 100, data_range: float = 1.0, seed: int = 0) -> dict:
    real, gen = _read_dir(real_dir), _read_dir(gen_dir)
    if real[0].shape != gen[0].shape:
        raise RunError(f"real volumes {real[0].shape} and generated {gen[0].shape} differ in shape")
    rep = evaluate(real, gen, protocol, encoder_seed, data_range, max_pairs, seed)
    d = rep.to_dict()
    jsonschema.validate(d, load_schema("report"))
    out = Path(out_dir)
    _write_json(out / "report.json", d)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["metric", "protocol", "value"])
        w.writeheader()
        for row in rep.rows():
            w.writerow({**row, "value": repr(row["value"])})
    return d


def _read_records(recs) -> list[np.ndarray]:
    return [r.voxels.astype(np.float64) for r in recs]


def ablate_rank(cfg: ExperimentConfig, base_ckpt, ranks: Sequence[int], data_dir=None,
                out_dir=None, kind=None, steps: int | None = None, n_samples: int | None = None) -> list[dict]:
    """Attach, count, fine-tune, sample and evaluate once per rank."""
    if not ranks:
        raise RunError("ranks must be non-empty")
    data_dir = Path(data_dir) if data_dir else cfg.out_dir / "data"
    out = Path(out_dir) if out_dir else cfg.out_dir / "ablation"
    kind = AdapterKind.parse(kind or cfg.adapter["kind"])
    ab = cfg.raw["ablation"]
    steps = steps or ab["finetune_steps"]
    n_samples = n_samples or ab["n_samples"]
    ev = cfg.raw["eval"]
    _, held = split_tag(cfg, data_dir, cfg.data["finetune_tag"])
    real = _read_records(held)
    rows = []
    for rank in ranks:
        run = out / f"rank_{rank}"
        summ = finetune(cfg, base_ckpt, data_dir, run, kind=kind, rank=rank, joint=False, steps=steps)
        paths = sample_volumes(run / CKPT_NAME, n_samples, cfg.raw["sampling"]["seed"], run / "samples",
                               figure=False)
        gen = [read_volume(p).voxels.astype(np.float64) for p in paths]
        rep = evaluate(real, gen, ev["protocol"], ev["encoder_seed"], ev["data_range"], ev["max_pairs"])
        losses = [r["loss"] for r in read_loss_csv(run / "loss.csv")]
        rows.append({
            "rank": rank,
            "n_params": summ["adapter_params"],
            "n_params_formula": summ["adapter_params_formula"],
            "ms_ssim": rep.ms_ssim,
            "mmd": rep.mmd,
            "loss": float(np.mean(losses[-min(10, len(losses)):])),
        })
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    plotting.plot_rank_ablation([r["rank"] for r in rows], [r["n_params"] for r in rows],
                                [r["ms_ssim"] for r in rows], out / "ablation.png", kind.value)
    return rows


def param_count_table(cfg: ExperimentConfig, ranks: Sequence[int], kinds: Sequence[str]) -> list[dict]:
    """Adapter sizes for every (kind, rank) on the configured model, without training."""
    rows = []
    for kind in kinds:
        for rank in ranks:
            model = build_model(cfg)
            rep = attach_adapters(model, kind, rank, targets=cfg.adapter["targets"], joint=False)
            conv = sum(c for _, k, c in rep.layers if k != AdapterKind.QUANTA_LINEAR.value)
            rows.append({
                "kind": AdapterKind.parse(kind).value, "rank": rank,
                "conv_params": conv, "linear_params": rep.adapter_params - conv,
                "adapter_params": rep.adapter_params,
                "formula_params": expected_adapter_count(model, kind, rank),
                "base_params": rep.base_params,
                "fraction": rep.adapter_params / rep.base_params,
            })
    return rows


def inspect_checkpoint(path) -> dict:
    ck = read_checkpoint(path)
    meta = ck.meta
    model_blobs = ck.section("model")
    adapter_blobs = ck.section("adapter")
    return {
        "path": str(path),
        "phase": meta["phase"],
        "step": meta["step"],
        "config_hash": meta["config_hash"],
        "schedule": meta["schedule"],
        "optimizer": meta["optimizer"],
        "attach": meta.get("attach"),
        "base_params": int(sum(v.size for v in model_blobs.values())),
        "adapter_params": int(sum(v.size for v in adapter_blobs.values())),
        "adapters": {k: {"kind": v["kind"], "rank": v["rank"]} for k, v in meta["adapters"].items()},
        "n_blobs": len(ck.blobs),
    }
