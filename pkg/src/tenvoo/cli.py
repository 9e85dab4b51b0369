"""Command-line runner.

Every verb reads the same JSON config (``--config``, layered over the desk
preset). ``--seed`` overrides every seed field in the config, ``--out``
and ``TENVOO_OUT`` set the run directory, ``--threads`` caps BLAS threads.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click
from threadpoolctl import threadpool_limits

from . import experiment as ex
from .adapters import AdapterError, AdapterKind
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .data import VolumeFormatError

_ERRORS = (ConfigError, ex.RunError, CheckpointError, VolumeFormatError, AdapterError, OSError)
_SEED_FIELDS = (("model", "seed"), ("adapter", "seed"), ("training", "seed"), ("data", "seed"),
                ("sampling", "seed"))


def _int_list(value: str) -> list[int]:
    try:
        out = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}") from None
    if not out:
        raise click.BadParameter("list is empty")
    return out


class Ctx:
    def __init__(self, config, seed, out, threads, base):
        self.config_path, self.seed, self.out, self.threads, self.base = config, seed, out, threads, base
        self._cfg = None

    @property
    def cfg(self):
        if self._cfg is None:
            over: dict = {}
            if self.seed is not None:
                for sec, key in _SEED_FIELDS:
                    over.setdefault(sec, {})[key] = self.seed
            try:
                cfg = load_config(self.config_path, overrides=over or None, base=self.base)
                if self.out is not None:
                    cfg = cfg.with_updates(out_dir=str(self.out))
            except ConfigError as exc:
                raise click.ClickException(str(exc)) from None
            self._cfg = cfg
        return self._cfg


def _run(ctx: Ctx, fn, *args, **kw):
    try:
        if ctx.threads:
            with threadpool_limits(limits=ctx.threads):
                return fn(*args, **kw)
        return fn(*args, **kw)
    except _ERRORS as exc:
        raise click.ClickException(str(exc)) from None


def _echo_json(obj):
    click.echo(json.dumps(obj, indent=2, sort_keys=True))


@click.group()
@click.option("--config", "config", type=click.Path(dir_okay=False, exists=True), default=None,
              help="JSON config layered over the preset.")
@click.option("--preset", type=click.Choice(["desk", "full"]), default="desk", show_default=True)
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None,
              help="Override every seed in the config.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Run directory.")
@click.option("--threads", type=click.IntRange(1), default=None, help="BLAS thread cap.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config, preset, seed, out, threads, verbose):
    """Tensor-network adapters for 3D diffusion models."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = Ctx(config, seed, out, threads, preset)


@main.command("gen-data")
@click.pass_obj
def gen_data(c: Ctx):
    """Write phantom volumes for every configured tag plus a manifest."""
    m = _run(c, ex.gen_data, c.cfg)
    click.echo(f"wrote {len(m['volumes'])} volumes to {c.cfg.out_dir / 'data'}")


@main.command()
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=None)
@click.option("--steps", type=click.IntRange(1), default=None)
@click.option("--resume", type=click.Path(dir_okay=False, exists=True), default=None)
@click.pass_obj
def pretrain(c: Ctx, data_dir, steps, resume):
    """Train the denoiser on the pretrain tag."""
    s = _run(c, ex.pretrain, c.cfg, data_dir, None, resume, steps)
    _echo_json({k: v for k, v in s.items() if k != "wall_seconds"})


@main.command()
@click.option("--base", "base_ckpt", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--kind", type=click.Choice([k.value for k in AdapterKind]), default=None)
@click.option("--rank", type=click.IntRange(1), default=None)
@click.option("--joint/--adapter-only", default=None, help="Also train non-adapted layers.")
@click.option("--steps", type=click.IntRange(1), default=None)
@click.option("--tag", default=None, help="Dataset tag to fine-tune on.")
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=None)
@click.pass_obj
def finetune(c: Ctx, base_ckpt, kind, rank, joint, steps, tag, data_dir):
    """Attach adapters to a pretrained checkpoint and train them."""
    s = _run(c, ex.finetune, c.cfg, base_ckpt, data_dir, None, kind, rank, joint, steps, tag)
    _echo_json({k: v for k, v in s.items() if k != "wall_seconds"})


@main.command()
@click.option("--checkpoint", "ckpt", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("-n", "n", type=click.IntRange(1), default=None)
@click.option("--merged", is_flag=True, help="Sample with adapters folded into the kernels.")
@click.option("--dest", type=click.Path(file_okay=False), default=None)
@click.pass_obj
def sample(c: Ctx, ckpt, n, merged, dest):
    """Ancestral sampling; seeds run from the sampling seed upwards."""
    s = c.cfg.raw["sampling"]
    dest = Path(dest) if dest else c.cfg.out_dir / "samples"
    paths = _run(c, ex.sample_volumes, ckpt, n or s["n"], s["seed"], dest, merged)
    for p in paths:
        click.echo(str(p))


@main.command("eval")
@click.option("--real", "real_dir", type=click.Path(file_okay=False, exists=True), required=True)
@click.option("--gen", "gen_dir", type=click.Path(file_okay=False, exists=True), required=True)
@click.option("--protocol", type=click.Choice(["pairwise", "nearest_real"]), default=None)
@click.option("--dest", type=click.Path(file_okay=False), default=None)
@click.pass_obj
def eval_cmd(c: Ctx, real_dir, gen_dir, protocol, dest):
    """MS-SSIM, MMD and MSE between a real and a generated directory."""
    e = c.cfg.raw["eval"]
    dest = Path(dest) if dest else c.cfg.out_dir / "eval"
    rep = _run(c, ex.eval_dirs, real_dir, gen_dir, dest, protocol or e["protocol"],
               e["encoder_seed"], e["max_pairs"], e["data_range"])
    _echo_json(rep)


@main.command("ablate-rank")
@click.option("--base", "base_ckpt", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--ranks", default=None, help="Comma-separated ranks, e.g. 1,2,4,6.")
@click.option("--kind", type=click.Choice(["TenVOO-L", "TenVOO-Q", "LoRA3D"]), default=None)
@click.option("--steps", type=click.IntRange(1), default=None)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=None)
@click.pass_obj
def ablate_rank(c: Ctx, base_ckpt, ranks, kind, steps, data_dir):
    """Fine-tune and evaluate once per rank; writes ablation.csv and a figure."""
    ranks = _int_list(ranks) if ranks else c.cfg.raw["ablation"]["ranks"]
    rows = _run(c, ex.ablate_rank, c.cfg, base_ckpt, ranks, data_dir, None, kind, steps)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


@main.command("param-count")
@click.option("--ranks", default="1,2,4,6", show_default=True)
@click.option("--kinds", default="TenVOO-L,TenVOO-Q,LoRA3D", show_default=True)
@click.pass_obj
def param_count(c: Ctx, ranks, kinds):
    """Adapter parameter counts per kind and rank for the configured model."""
    kinds = [k.strip() for k in kinds.split(",") if k.strip()]
    rows = _run(c, ex.param_count_table, c.cfg, _int_list(ranks), kinds)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "fraction": f"{r['fraction']:.6f}"})


@main.command("inspect-checkpoint")
@click.argument("ckpt", type=click.Path(dir_okay=False, exists=True))
@click.pass_obj
def inspect_checkpoint(c: Ctx, ckpt):
    """Print a checkpoint's metadata summary as JSON."""
    _echo_json(_run(c, ex.inspect_checkpoint, ckpt))


if __name__ == "__main__":
    main()
