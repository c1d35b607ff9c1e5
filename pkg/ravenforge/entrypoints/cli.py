import os

import dotenv

# Thread settings must be in the environment before numpy is first imported.
dotenv.load_dotenv()
dotenv.load_dotenv(".env.secret")
for _name in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_name, os.environ.get("RAVENFORGE_THREADS", "1"))

import functools
import hashlib
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Callable, NoReturn

import numpy as np
import typer
from sqlalchemy.exc import SQLAlchemyError

from ravenforge import __version__
from ravenforge.config import (
    ProbeConfig,
    RunConfig,
    ScheduleShape,
    VaeTrainConfig,
    Variant,
    WrenArchitecture,
    WrenTrainConfig,
)
from ravenforge.db.crud import create_run, list_reports, record_report
from ravenforge.errors import FormatError, ParameterError, RavenforgeError
from ravenforge.evaluation.latents import (
    DEFAULT_PROBE_SIZE,
    latent_distribution_plot,
    latent_support,
    latent_traversal,
    save_grid_png,
)
from ravenforge.evaluation.metrics import RegimeReport, evaluate, regime_table
from ravenforge.evaluation.probe import reconstruction_probe
from ravenforge.lib.checkpoint import sidecar_path
from ravenforge.lib.tensor import precision
from ravenforge.models.vae import load_vae, train_vae
from ravenforge.models.wren import PanelEmbedder, epoch_log_dicts, load_wren, train_wren
from ravenforge.pgm.dataset import PgmDataset, build_dataset, load_dataset
from ravenforge.pgm.splits import Regime

logger = logging.getLogger(__name__)

EXIT_CODES = {"io": 3, "numeric": 4}


class Precision(str, Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"


@dataclass
class GlobalOptions:
    threads: int = 1
    precision: Precision = Precision.FLOAT32
    record: bool = True


# ------------------------------------------------------
# Error reporting
# ------------------------------------------------------
def _fail(category: str, error: Exception) -> NoReturn:
    message = " ".join(str(error).split())
    typer.echo(f"error[{category}]: {message}", err=True)
    raise typer.Exit(code=EXIT_CODES.get(category, 1))


def _cli_errors[**P, T](func: Callable[P, T]) -> Callable[P, T]:
    """Turn library errors into one `error[<category>]: ...` line and an exit status."""

    @functools.wraps(func)
    def wrapper(*args: P.args, **kwargs: P.kwargs) -> T:
        try:
            return func(*args, **kwargs)
        except RavenforgeError as e:
            _fail(e.category, e)
        except OSError as e:
            _fail("io", e)
        except ValueError as e:
            _fail("parameter", e)

    return wrapper


# ------------------------------------------------------
# Provenance
# ------------------------------------------------------
def _file_digest(path: Path) -> str:
    with path.open("rb") as f:
        return hashlib.file_digest(f, "sha256").hexdigest()


def _input_hashes(inputs: dict[str, Path | None]) -> dict[str, str]:
    """SHA-256 of every input file; directories hash their sorted file listing."""
    hashes = {}
    for name, path in inputs.items():
        if path is None:
            continue
        path = Path(path)
        if path.is_dir():
            digest = hashlib.sha256()
            for child in sorted(p for p in path.iterdir() if p.is_file()):
                if child.name != "manifest.json":
                    digest.update(f"{child.name}:{_file_digest(child)}\n".encode())
            hashes[name] = digest.hexdigest()
        else:
            hashes[name] = _file_digest(path)
            if sidecar_path(path).exists():
                hashes[f"{name}.json"] = _file_digest(sidecar_path(path))
    return hashes


def _jsonable(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def manifest_path(out: Path) -> Path:
    """`manifest.json` inside directory outputs, `<name>.manifest.json` beside file outputs."""
    if out.is_dir():
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def _finish(
    ctx: typer.Context,
    command: str,
    out: Path,
    params: dict[str, Any],
    inputs: dict[str, Path | None],
    report: RegimeReport | None = None,
) -> RunConfig:
    """Write the run manifest and record the run in the registry."""
    opts: GlobalOptions = ctx.obj
    manifest = RunConfig(
        command=command,
        version=__version__,
        seed=params.get("seed"),
        threads=opts.threads,
        precision=opts.precision.value,
        out=str(out),
        params=_jsonable(params),
        inputs=_input_hashes(inputs),
    )
    path = manifest_path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2) + "\n")
    if opts.record:
        try:
            payload = manifest.model_dump(mode="json")
            run = create_run(command=command, manifest=payload, out=str(out))
            if report is not None:
                record_report(run_id=run.id, report=report)
        except SQLAlchemyError as e:
            logger.warning("Could not record run in the registry: %s", e)
    return manifest


# ------------------------------------------------------
# Model loading
# ------------------------------------------------------
def load_embedder(path: Path, variant: Variant | None = None) -> PanelEmbedder:
    """Panel embedder from a VAE checkpoint (as `variant`) or a relation-network checkpoint.

    Raises:
        FormatError: If the checkpoint has no sidecar or an unknown kind
    """
    meta_path = sidecar_path(Path(path))
    if not meta_path.exists():
        raise FormatError(f"{path} has no sidecar {meta_path.name}")
    kind = json.loads(meta_path.read_text()).get("kind")
    match kind:
        case "vae":
            vae, _ = load_vae(path)
            return PanelEmbedder.from_vae(vae, variant or Variant.VAE_FROZEN)
        case "wren":
            _, embedder, _ = load_wren(path)
            return embedder
    raise FormatError(f"{path} holds a {kind!r} checkpoint, expected 'vae' or 'wren'")


def _probe_images(dataset: PgmDataset, count: int, seed: int) -> np.ndarray:
    panels = dataset.images().reshape(-1, dataset.resolution, dataset.resolution)
    if count >= len(panels):
        return panels
    chosen = np.sort(np.random.default_rng(seed).choice(len(panels), count, replace=False))
    return panels[chosen]


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------
# Typer app setup
# ------------------------------------------------------
app = typer.Typer(
    help="Generate matrix-reasoning problems, train a beta-VAE and a relation network, "
    "and evaluate how well the learned representations generalize.",
    no_args_is_help=True,
)


@app.callback()
@_cli_errors
def main(
    ctx: typer.Context,
    config: Annotated[
        Path | None,
        typer.Option(
            exists=True,
            dir_okay=False,
            help='JSON file of per-command defaults, e.g. {"gen": {"seed": 7}}',
        ),
    ] = None,
    threads: Annotated[
        int, typer.Option(envvar="RAVENFORGE_THREADS", min=1, help="Worker processes")
    ] = 1,
    precision_: Annotated[
        Precision, typer.Option("--precision", help="Tensor precision")
    ] = Precision.FLOAT32,
    verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Log at DEBUG level")] = False,
    record: Annotated[
        bool, typer.Option("--record/--no-record", help="Record the run in the local registry")
    ] = True,
):
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)
    if config is not None:
        defaults = json.loads(config.read_text())
        if not isinstance(defaults, dict):
            raise ParameterError(f"{config} must hold a JSON object keyed by command name")
        ctx.default_map = {**(ctx.default_map or {}), **defaults}
    ctx.obj = GlobalOptions(threads=threads, precision=precision_, record=record)


@app.command()
@_cli_errors
def gen(
    ctx: typer.Context,
    out: Annotated[Path, typer.Option(file_okay=False, help="Output directory")],
    regime: Annotated[Regime, typer.Option(help="Generalization regime")] = Regime.NEUTRAL,
    train: Annotated[int, typer.Option(min=1, help="Training problems")] = 1000,
    val: Annotated[int, typer.Option(min=1, help="Validation problems")] = 100,
    test: Annotated[int, typer.Option(min=1, help="Test problems")] = 200,
    res: Annotated[int, typer.Option(help="Panel resolution in pixels (40 or 80)")] = 40,
    seed: Annotated[int, typer.Option(help="Root seed")] = 0,
):
    """
    Generate train/val/test splits of a regime.

    Usage:
      ravenforge gen --regime neutral --train 1000 --val 100 --test 200 --res 40 --seed 7 --out DIR
    """
    counts = {"train": train, "val": val, "test": test}
    build_dataset(regime, counts, res, seed, out, workers=ctx.obj.threads)
    params = {"regime": regime, "counts": counts, "res": res, "seed": seed}
    _finish(ctx, "gen", out, params, {})
    typer.echo(f"Wrote {train}/{val}/{test} {regime.value} problems to {out}")


@app.command("train-vae")
@_cli_errors
def train_vae_command(
    ctx: typer.Context,
    data: Annotated[Path, typer.Option(exists=True, file_okay=False, help="Dataset directory")],
    out: Annotated[Path, typer.Option(dir_okay=False, help="Checkpoint to write")],
    epochs: Annotated[int, typer.Option(min=1)] = 10,
    lr: Annotated[float, typer.Option(min=0.0)] = 3e-4,
    batch: Annotated[int, typer.Option(min=1, help="Problems per step (16 panels each)")] = 32,
    beta_start: Annotated[float, typer.Option(min=0.0)] = 0.5,
    beta_end: Annotated[float, typer.Option(min=0.0)] = 4.0,
    ramp: Annotated[float, typer.Option(help="Fraction of steps spent ramping beta")] = 0.5,
    schedule: Annotated[ScheduleShape, typer.Option()] = ScheduleShape.LINEAR,
    latent_dim: Annotated[int, typer.Option(min=1)] = 64,
    channels: Annotated[int, typer.Option(min=1)] = 32,
    max_steps: Annotated[int | None, typer.Option(min=1, help="Stop after this many steps")] = None,
    seed: Annotated[int, typer.Option()] = 0,
):
    """
    Train a beta-VAE on every panel of the training split.

    Usage:
      ravenforge train-vae --data DIR --epochs 10 --beta-start 0.5 --beta-end 4.0 --out ckpt.rvf
    """
    config = VaeTrainConfig(
        epochs=epochs,
        lr=lr,
        batch_problems=batch,
        beta_start=beta_start,
        beta_end=beta_end,
        ramp_fraction=ramp,
        schedule=schedule,
        seed=seed,
        latent_dim=latent_dim,
        channels=channels,
        max_steps=max_steps,
    )
    with precision(ctx.obj.precision.value):
        dataset = load_dataset(data, "train")
        _, log = train_vae(dataset, config, out)
    history = [entry.summary() for entry in log]
    _write_json(out.with_name(out.name + ".history.json"), history)
    _finish(ctx, "train-vae", out, config.model_dump(mode="json"), {"data": data})
    if history:
        final = history[-1]
        typer.echo(
            f"Trained {len(history)} steps: reconstruction {final['reconstruction']:.3f}, "
            f"KL {final['kl_total']:.3f}, beta {final['beta']:.3f}. Saved {out}"
        )


@app.command("train-wren")
@_cli_errors
def train_wren_command(
    ctx: typer.Context,
    data: Annotated[Path, typer.Option(exists=True, file_okay=False, help="Dataset directory")],
    out: Annotated[Path, typer.Option(dir_okay=False, help="Checkpoint to write")],
    embedder: Annotated[
        Path | None,
        typer.Option(exists=True, dir_okay=False, help="VAE checkpoint (VAE variants only)"),
    ] = None,
    variant: Annotated[Variant, typer.Option()] = Variant.VAE_FROZEN,
    frozen_epochs: Annotated[int, typer.Option(min=0)] = 6,
    finetune_epochs: Annotated[int, typer.Option(min=0)] = 2,
    lr: Annotated[float, typer.Option(min=0.0)] = 3e-4,
    batch: Annotated[int, typer.Option(min=1)] = 32,
    dropout: Annotated[float, typer.Option(min=0.0, max=0.99)] = 0.5,
    seed: Annotated[int, typer.Option()] = 0,
):
    """
    Train a relation network on the training split.

    Usage:
      ravenforge train-wren --data DIR --embedder ckpt.rvf --variant vae_frozen --out wren.rvf
      ravenforge train-wren --data DIR --variant cnn_baseline --out cnn.rvf
    """
    if variant != Variant.CNN_BASELINE and embedder is None:
        raise typer.BadParameter(f"--embedder is required for {variant.value}")
    config = WrenTrainConfig(
        variant=variant,
        frozen_epochs=frozen_epochs,
        finetune_epochs=finetune_epochs,
        lr=lr,
        batch_problems=batch,
        seed=seed,
        architecture=WrenArchitecture(dropout=dropout),
    )
    with precision(ctx.obj.precision.value):
        dataset = load_dataset(data, "train")
        if variant == Variant.CNN_BASELINE:
            panel_embedder = PanelEmbedder(
                variant,
                dataset.resolution,
                np.random.default_rng(np.random.SeedSequence([seed, 1])),
                cnn_features=config.architecture.cnn_features,
            )
        else:
            panel_embedder = load_embedder(embedder, variant)
        _, _, log = train_wren(dataset, panel_embedder, config, out)
    _write_json(out.with_name(out.name + ".history.json"), epoch_log_dicts(log))
    inputs = {"data": data, "embedder": embedder}
    _finish(ctx, "train-wren", out, config.model_dump(mode="json"), inputs)
    if log:
        final = log[-1]
        typer.echo(
            f"Final train accuracy {final.accuracy:.3f} (loss {final.loss:.4f}). Saved {out}"
        )


@app.command("eval")
@_cli_errors
def eval_command(
    ctx: typer.Context,
    data: Annotated[Path, typer.Option(exists=True, file_okay=False, help="Dataset directory")],
    wren: Annotated[Path, typer.Option(exists=True, dir_okay=False, help="Relation network")],
    out: Annotated[Path, typer.Option(dir_okay=False, help="report.json to write")],
    embedder: Annotated[
        Path | None,
        typer.Option(
            exists=True, dir_okay=False, help="Embedder checkpoint overriding the stored one"
        ),
    ] = None,
    split: Annotated[str, typer.Option(help="Split to score")] = "test",
    batch: Annotated[int, typer.Option(min=1)] = 64,
):
    """
    Score a relation network on a split (and on val when scoring test).

    Usage:
      ravenforge eval --data DIR --wren wren.rvf --split test --out report.json
    """
    with precision(ctx.obj.precision.value):
        model, panel_embedder, meta = load_wren(wren)
        if embedder is not None:
            panel_embedder = load_embedder(embedder, Variant(meta["variant"]))
        dataset = load_dataset(data, split)
        val = None
        if split == "test" and (data / "val.pgmd").exists():
            val = load_dataset(data, "val")
        report = evaluate(model, panel_embedder, dataset, val, batch)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.model_dump_json(indent=2) + "\n")
    params = {"split": split, "batch": batch}
    _finish(ctx, "eval", out, params, {"data": data, "wren": wren, "embedder": embedder}, report)
    typer.echo(
        f"{report.regime.label} / {report.variant.label}: "
        f"test accuracy {100 * report.test_accuracy:.1f}% (kappa {report.test_kappa:.3f})"
    )


@app.command()
@_cli_errors
def traverse(
    ctx: typer.Context,
    vae: Annotated[Path, typer.Option(exists=True, dir_okay=False, help="VAE checkpoint")],
    data: Annotated[Path, typer.Option(exists=True, file_okay=False, help="Dataset directory")],
    out: Annotated[Path, typer.Option(dir_okay=False, help="PNG to write")],
    image: Annotated[int, typer.Option(min=0, help="Panel index into the training split")] = 0,
    dims: Annotated[
        str, typer.Option(help="Comma-separated latent dims; default the two highest-KL dims")
    ] = "",
    steps: Annotated[int, typer.Option(min=2)] = 10,
    probe: Annotated[int, typer.Option(min=2, help="Panels used to measure support")] = (
        DEFAULT_PROBE_SIZE
    ),
    histograms: Annotated[bool, typer.Option(help="Also write latent histograms")] = False,
    seed: Annotated[int, typer.Option()] = 0,
):
    """
    Decode sweeps of latent dimensions across their posterior support.

    Usage:
      ravenforge traverse --vae ckpt.rvf --data DIR --image 0 --dims 1,63 --steps 10 --out grid.png
    """
    try:
        chosen = [int(d) for d in dims.split(",") if d.strip()]
    except ValueError:
        raise typer.BadParameter(f"--dims must be comma-separated integers, got {dims!r}") from None
    with precision(ctx.obj.precision.value):
        model, _ = load_vae(vae)
        dataset = load_dataset(data, "train")
        panels = dataset.images().reshape(-1, dataset.resolution, dataset.resolution)
        if image >= len(panels):
            raise ParameterError(f"--image {image} out of range for {len(panels)} panels")
        probe_images = _probe_images(dataset, probe, seed)
        support = latent_support(model, probe_images)
        chosen = chosen or support.top(2)
        grid = latent_traversal(model, panels[image], chosen, steps, support)
        save_grid_png(grid, out)
        _write_json(out.with_name(out.name + ".support.json"), support.to_dict())
        if histograms:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
            latent_distribution_plot(
                model, probe_images, chosen, out.with_name(out.stem + "_latents"), rng
            )
    params = {
        "image": image,
        "dims": chosen,
        "steps": steps,
        "probe": probe,
        "histograms": histograms,
        "seed": seed,
    }
    _finish(ctx, "traverse", out, params, {"vae": vae, "data": data})
    typer.echo(f"Wrote traversal of dims {chosen} to {out}")


@app.command()
@_cli_errors
def probe(
    ctx: typer.Context,
    embedder: Annotated[
        Path, typer.Option(exists=True, dir_okay=False, help="VAE or relation-network checkpoint")
    ],
    data: Annotated[Path, typer.Option(exists=True, file_okay=False, help="Dataset directory")],
    out: Annotated[Path, typer.Option(dir_okay=False, help="probe_report.json to write")],
    epochs: Annotated[int, typer.Option(min=1)] = 5,
    lr: Annotated[float, typer.Option(min=0.0)] = 3e-4,
    batch: Annotated[int, typer.Option(min=1)] = 32,
    channels: Annotated[int, typer.Option(min=1)] = 32,
    max_problems: Annotated[int | None, typer.Option(min=1)] = None,
    seed: Annotated[int, typer.Option()] = 0,
):
    """
    Train a decoder on frozen panel embeddings and report its reconstruction error.

    Usage:
      ravenforge probe --embedder cnn.rvf --data DIR --out probe_report.json
    """
    config = ProbeConfig(
        epochs=epochs,
        lr=lr,
        batch_problems=batch,
        seed=seed,
        channels=channels,
        max_problems=max_problems,
    )
    with precision(ctx.obj.precision.value):
        panel_embedder = load_embedder(embedder)
        dataset = load_dataset(data, "train")
        _, report = reconstruction_probe(panel_embedder, dataset, config, out.parent)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.model_dump_json(indent=2) + "\n")
    _finish(ctx, "probe", out, config.model_dump(mode="json"), {"embedder": embedder, "data": data})
    typer.echo(f"{report.variant} probe: mean per-panel MSE {report.mse:.3f}")


@app.command()
@_cli_errors
def report(
    ctx: typer.Context,
    files: Annotated[list[Path] | None, typer.Argument(help="report.json files")] = None,
    registry: Annotated[bool, typer.Option(help="Include reports stored in the registry")] = False,
    out: Annotated[Path | None, typer.Option(dir_okay=False, help="Markdown file to write")] = None,
):
    """
    Render evaluation reports as a regime-by-variant table.

    Usage:
      ravenforge report runs/*/report.json
      ravenforge report --registry
    """
    reports = list_reports() if registry else []
    for path in files or []:
        reports.append(RegimeReport.model_validate_json(path.read_text()))
    if not reports:
        raise ParameterError("no reports given; pass report.json files or --registry")
    table = regime_table(reports)
    typer.echo(table, nl=False)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table)
        params = {"registry": registry, "files": [str(p) for p in files or []]}
        inputs = {f"report{i}": p for i, p in enumerate(files or [])}
        _finish(ctx, "report", out, params, inputs)


if __name__ == "__main__":
    app()
