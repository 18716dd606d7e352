"""Command-line interface.

Subcommands: generate (dual-run layout edit from a job file), segment
(text-driven masks for an existing image), evaluate (alignment/perceptual
scores for a manifest of images), inspect (render captured attention).

Exit codes: 0 success, 2 configuration/usage error, 3 backend or runtime
failure.
"""

from __future__ import annotations

import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click
import numpy as np

from . import __version__
from .backends import create_backend
from .errors import BackendError, ConfigError
from .evaluation import create_scorer, evaluate_pairs, write_results
from .imgio import load_image, save_heatmap, save_image
from .jobs import ResolvedJob, load_job, resolve_job, write_snapshot
from .masking import export_mask_png, normalized_token_map
from .pipeline import capture_source_records, run_layout_edit
from .segmentation import segment_image
from .taps import TapPlan
from .types import RunConfig


@click.group()
@click.version_option(version=__version__, prog_name="layoutctl")
@click.option("--backend", "backend_kind", type=click.Choice(["toy", "ldm"]), default=None,
              help="Override the job's backend kind.")
@click.option("--seed", type=int, default=None, help="Override the run seed.")
@click.option("--device", default=None, help="Device for the ldm backend (cpu/cuda).")
@click.pass_context
def cli(ctx, backend_kind, seed, device):
    """Mask-free object layout control for latent diffusion."""
    ctx.ensure_object(dict)
    ctx.obj.update(backend_kind=backend_kind, seed=seed, device=device)


def _resolve_from_file(job_path: str, ctx_obj: dict) -> ResolvedJob:
    raw = load_job(job_path)
    if ctx_obj.get("backend_kind"):
        raw.setdefault("backend", {})
        raw["backend"]["kind"] = ctx_obj["backend_kind"]
    if ctx_obj.get("device"):
        raw.setdefault("backend", {})
        raw["backend"]["device"] = ctx_obj["device"]
    if ctx_obj.get("seed") is not None:
        raw.setdefault("run", {})
        raw["run"]["seed"] = ctx_obj["seed"]
    return resolve_job(raw)


def _run_one(job: ResolvedJob, out_dir: Path, dump_tensors: bool) -> Dict[str, object]:
    began = time.perf_counter()
    result = run_layout_edit(
        job.backend,
        job.prompt_source,
        job.prompt_target,
        job.edits,
        job.run,
        fill=job.layout_fill,
        mask_source_layers=job.mask_source_layers,
        dump_dir=(out_dir / "tensors") if dump_tensors else None,
    )
    elapsed = time.perf_counter() - began

    out_dir.mkdir(parents=True, exist_ok=True)
    write_snapshot(job, out_dir / "resolved.json")
    save_image(out_dir / "source.png", result.image_source)
    save_image(out_dir / "target.png", result.image_target)

    eta_by_token = {e.token_index: e.eta for e in job.edits}
    for step, by_token in sorted(result.trace.masks.items()):
        for token_index, mask in sorted(by_token.items()):
            export_mask_png(
                mask,
                out_dir / "masks" / f"step_{step:03d}_token_{token_index:02d}.png",
                eta=eta_by_token.get(token_index),
                step=step,
                source_layers=result.trace.mask_source_layers,
            )

    trace_doc = {
        "prompt_source": job.prompt_source.text,
        "prompt_target": job.prompt_target.text,
        "elapsed_s": elapsed,
        "backend": job.backend.describe() if hasattr(job.backend, "describe") else {},
        **result.trace.to_dict(),
    }
    with open(out_dir / "trace.json", "w") as fh:
        json.dump(trace_doc, fh, indent=2)
    return {"out": str(out_dir), "elapsed_s": elapsed,
            "edited_steps": result.trace.edited_steps()}


def _generate_worker(args: Tuple[dict, int, str, bool]) -> Dict[str, object]:
    snapshot, seed, out_dir, dump_tensors = args
    snapshot = dict(snapshot)
    snapshot["run"] = dict(snapshot["run"], seed=seed)
    job = resolve_job(snapshot)
    return _run_one(job, Path(out_dir), dump_tensors)


@cli.command()
@click.argument("job_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@click.option("--seeds", default=None,
              help="Comma-separated seeds; each run lands in OUT/seed_<n>/.")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Worker processes when running multiple seeds.")
@click.option("--dump-tensors", is_flag=True, help="Also dump captured tensors as .npy.")
@click.pass_context
def generate(ctx, job_file, out_dir, seeds, jobs, dump_tensors):
    """Run the dual source/target trajectories for JOB_FILE."""
    job = _resolve_from_file(job_file, ctx.obj)
    out = Path(out_dir)

    if seeds is None:
        info = _run_one(job, out, dump_tensors)
        click.echo(f"wrote {info['out']} ({info['elapsed_s']:.2f}s, "
                   f"edited steps: {info['edited_steps']})")
        return

    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {seeds!r}")
    if not seed_list:
        raise ConfigError("--seeds is empty")

    tasks = [
        (job.snapshot, seed, str(out / f"seed_{seed}"), dump_tensors)
        for seed in seed_list
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_generate_worker, tasks))
    else:
        results = [_generate_worker(t) for t in tasks]
    for info in results:
        click.echo(f"wrote {info['out']} ({info['elapsed_s']:.2f}s)")


@cli.command()
@click.option("--image", "image_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Image to segment.")
@click.option("--prompt", required=True, help="Text describing the image.")
@click.option("--token", "tokens", multiple=True, required=True,
              help="Prompt word (or token index) to segment; repeatable.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--eta", type=float, default=0.2, show_default=True,
              help="Mask threshold in [0, 1].")
@click.option("--timestep", type=int, default=500, show_default=True,
              help="Train-scale timestep for the single pass.")
@click.pass_context
def segment(ctx, image_path, prompt, tokens, out_dir, eta, timestep):
    """Segment an image by prompt tokens, without masks or training."""
    spec = {"kind": ctx.obj.get("backend_kind") or "toy"}
    if ctx.obj.get("seed") is not None:
        spec["seed"] = ctx.obj["seed"]
    if spec["kind"] == "ldm" and ctx.obj.get("device"):
        spec["device"] = ctx.obj["device"]
    backend = create_backend(spec)
    image = load_image(image_path)
    expected = backend.codec.image_shape
    if image.shape != expected:
        raise ConfigError(
            f"backend expects a {expected[2]}x{expected[1]} image, "
            f"got {image.shape[2]}x{image.shape[1]}"
        )

    result = segment_image(backend, image, prompt, list(tokens),
                           eta=eta, timestep=timestep)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for idx, mask in sorted(result.masks.items()):
        export_mask_png(mask, out / f"token_{idx:02d}_mask.png", eta=eta)
        full = result.image_masks[idx]
        save_heatmap(out / f"token_{idx:02d}_mask_full.png", full.astype(np.float64))
    save_heatmap(out / "query_magnitude.png", result.query_magnitude, upscale_to=256)
    with open(out / "segmentation.json", "w") as fh:
        json.dump(result.to_dict(), fh, indent=2)
    click.echo(f"wrote {out} ({len(result.masks)} token masks)")


@cli.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--scorer", "scorer_kind", type=click.Choice(["stub", "clip"]),
              default="stub", show_default=True)
@click.option("--model-path", default=None, help="Local CLIP weights (clip scorer).")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Worker processes (stub scorer only).")
def evaluate(manifest, out_dir, scorer_kind, model_path, jobs):
    """Score images listed in MANIFEST (JSON) with CLIP/LPIPS-style metrics.

    Manifest rows: {"name": ..., "image": path, "text": prompt?,
    "reference": path?}. Text yields an alignment score, reference a
    perceptual distance; either may be omitted.
    """
    try:
        with open(manifest) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{manifest}: invalid JSON: {exc.msg}")
    rows = doc["items"] if isinstance(doc, dict) and "items" in doc else doc
    if not isinstance(rows, list) or not rows:
        raise ConfigError(f"{manifest}: expected a non-empty list of items")

    base = Path(manifest).parent
    items = []
    for i, row in enumerate(rows):
        if not isinstance(row, dict) or "image" not in row:
            raise ConfigError(f"{manifest}: item {i} needs an 'image' path")
        image = load_image(base / row["image"] if not Path(row["image"]).is_absolute()
                           else row["image"])
        ref = row.get("reference")
        items.append({
            "name": row.get("name", Path(row["image"]).stem),
            "image": image,
            "text": row.get("text"),
            "reference": load_image(base / ref if not Path(ref).is_absolute() else ref)
            if ref else None,
        })

    scorer = create_scorer(scorer_kind, model_path=model_path)
    results = evaluate_pairs(scorer, items, jobs=jobs)
    csv_path, json_path = write_results(results, out_dir, scorer,
                                        extra_meta={"manifest": str(manifest)})
    click.echo(f"wrote {csv_path} and {json_path} ({len(results)} rows)")


@cli.group()
def inspect():
    """Render captured attention state for debugging."""


def _inspect_setup(ctx_obj, job_file, step) -> Tuple[ResolvedJob, RunConfig, int]:
    job = _resolve_from_file(job_file, ctx_obj)
    if not 0 <= step < job.run.total_steps:
        raise ConfigError(
            f"--step {step} out of range for a {job.run.total_steps}-step run"
        )
    return job, job.run, step


@inspect.command("cross-maps")
@click.argument("job_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--step", type=int, default=0, show_default=True)
@click.option("--layer", type=int, default=None, help="Single cross layer (default: all).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def inspect_cross_maps(ctx, job_file, step, layer, out_dir):
    """Per-token normalized cross-attention heatmaps from the source pass."""
    job, run, step = _inspect_setup(ctx.obj, job_file, step)
    backend = job.backend
    layers = backend.cross_layers() if layer is None else [layer]
    if any(backend.layer_kinds.get(l) != "cross" for l in layers):
        raise ConfigError(f"--layer {layer} is not a cross-attention layer")

    plan = TapPlan(capture_cross=frozenset(layers))
    records = capture_source_records(backend, job.prompt_source, run, step, plan)

    out = Path(out_dir)
    token_indices = [e.token_index for e in job.edits] or list(
        range(len(job.prompt_source.token_ids))
    )
    count = 0
    for rec in records:
        h, w = backend.layer_resolutions[rec.site.layer]
        for idx in token_indices:
            grid = normalized_token_map(rec, idx, (h, w))
            save_heatmap(
                out / f"step_{step:03d}_layer_{rec.site.layer:02d}_token_{idx:02d}.png",
                grid, upscale_to=128,
            )
            count += 1
    click.echo(f"wrote {count} heatmaps to {out}")


@inspect.command("masks")
@click.argument("job_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--step", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def inspect_masks(ctx, job_file, step, out_dir):
    """The binary masks the pipeline would use at one step."""
    from .masking import create_mask

    job, run, step = _inspect_setup(ctx.obj, job_file, step)
    if not job.edits:
        raise ConfigError("job has no objects to mask")
    backend = job.backend
    layers = job.mask_source_layers or backend.cross_layers()
    plan = TapPlan(capture_cross=frozenset(layers))
    records = capture_source_records(backend, job.prompt_source, run, step, plan)

    resolutions = backend.layer_resolutions
    window_self = backend.self_layers_in_window(run.layer_window)
    if not window_self:
        raise ConfigError(f"layer_window {run.layer_window} contains no self layers")
    reference = max(window_self, key=lambda l: resolutions[l][0] * resolutions[l][1])

    out = Path(out_dir)
    for e in job.edits:
        mask = create_mask(records, e.token_index, e.eta, reference, resolutions)
        export_mask_png(
            mask, out / f"step_{step:03d}_token_{e.token_index:02d}.png",
            eta=e.eta, step=step, source_layers=layers,
        )
    click.echo(f"wrote {len(job.edits)} masks to {out}")


@inspect.command("q-heatmaps")
@click.argument("job_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--step", type=int, default=0, show_default=True)
@click.option("--layer", type=int, default=None, help="Single self layer (default: all).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def inspect_q_heatmaps(ctx, job_file, step, layer, out_dir):
    """L2-norm heatmaps of self-attention queries from the source pass."""
    job, run, step = _inspect_setup(ctx.obj, job_file, step)
    backend = job.backend
    layers = backend.self_layers() if layer is None else [layer]
    if any(backend.layer_kinds.get(l) != "self" for l in layers):
        raise ConfigError(f"--layer {layer} is not a self-attention layer")

    plan = TapPlan(capture_self_q=frozenset(layers))
    records = capture_source_records(backend, job.prompt_source, run, step, plan)

    out = Path(out_dir)
    for rec in records:
        h, w = backend.layer_resolutions[rec.site.layer]
        norm = np.linalg.norm(rec.self_query, axis=(0, 2)).reshape(h, w)
        save_heatmap(out / f"step_{step:03d}_layer_{rec.site.layer:02d}_qnorm.png",
                     norm, upscale_to=128)
    click.echo(f"wrote {len(records)} heatmaps to {out}")


def main(argv: Optional[List[str]] = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 130
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return max(exc.exit_code, 2)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 2
    except BackendError as exc:
        click.echo(f"backend error: {exc}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
