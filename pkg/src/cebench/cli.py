"""Operator entry point: artifact production, the evaluation matrix, and
report assembly.

Exit codes: 0 ok, 2 config error, 3 missing-artifact dependency error,
4 numeric/training error. All outputs live under the configured output
directory (resolved against the CEBENCH_OUT_ROOT environment variable when
set); every report row embeds the configuration content hash.
"""

from __future__ import annotations

import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import bench
from .bench import (
    CELL_TEMPLATES,
    IreceConfig,
    ScenarioSpec,
    full_matrix,
    report_row,
    run_scenario,
    surrogate_config,
    write_report,
)
from .config import RunConfig
from .denoiser import NeuralDenoiser
from .erasure import ErasureSpec, erase
from .errors import ConfigError, DependencyError, NumericError, TrainingError
from .rng import stream
from .schedule import build_linear_schedule
from .ti import TiConfig, save_embedding, ti_learn
from .trainer import (
    Classifier,
    ClassifierConfig,
    TrainConfig,
    train_classifier,
    train_denoiser,
    write_loss_curve,
)

PRODUCERS = {
    "std": "train-denoiser",
    "surrogate": "train-denoiser",
    "surrogate_wide": "train-denoiser",
    "classifier": "train-classifier",
    "erased": "erase",
}


def artifact_paths(cfg: RunConfig) -> dict:
    root = cfg.output_root()
    return {
        "std": root / "models" / "std.npz",
        "surrogate": root / "models" / "surrogate.npz",
        "surrogate_wide": root / "models" / "surrogate_wide.npz",
        "classifier": root / "models" / "classifier.npz",
        "erased": root / "models" / f"erased_{cfg.eraser}_{cfg.erase_target}.npz",
        "data": root / "data" / "normal",
        "embeddings": root / "embeddings",
        "cells": root / "cells",
        "report": root / "report.csv",
        "sweep": root / "sweep_irece.csv",
    }


def require(paths: dict, key: str) -> Path:
    path = paths[key]
    if not path.exists():
        raise DependencyError(f"missing artifact {path}; run `{PRODUCERS[key]}` first")
    return path


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.train_epochs,
        batch_size=cfg.train_batch_size,
        lr=cfg.train_lr,
        seed=cfg.root_seed,
        width=cfg.width,
        heads=cfg.heads,
        patch=cfg.patch,
        blocks=cfg.blocks,
        samples_per_concept=cfg.samples_per_concept,
        num_train_steps=cfg.num_train_steps,
        ema_decay=cfg.ema_decay,
    )


def ti_config(cfg: RunConfig) -> TiConfig:
    return TiConfig(
        lr=cfg.ti_lr,
        steps=cfg.ti_steps,
        batch_size=cfg.ti_batch_size,
        seed=cfg.root_seed,
        template=cfg.ti_template,
    )


def irece_config(cfg: RunConfig, tau=None, tstar=None) -> IreceConfig:
    return IreceConfig(
        tau=cfg.tau if tau is None else tau,
        t_star=cfg.tstar if tstar is None else tstar,
        access=cfg.irece_access,
        seed=cfg.root_seed,
        variance_matched=cfg.variance_matched,
    )


def schedule_of(cfg: RunConfig):
    return build_linear_schedule(
        cfg.num_train_steps, cfg.beta_start, cfg.beta_end, cfg.inference_steps
    )


# -- cell execution --------------------------------------------------------


def cell_filename(eraser: str, spec: ScenarioSpec) -> str:
    strategy = spec.prompt_strategy
    parts = [
        eraser,
        spec.modality,
        spec.access or "-",
        "null" if strategy == "" else (strategy or "-"),
        spec.concept,
        "irece" if spec.irece else "plain",
    ]
    return "_".join(parts) + ".csv"


def _run_cell(cfg_values: dict, eraser: str, spec_kw: dict) -> dict:
    """Execute one evaluation cell from its serialized description.

    Top-level (picklable) so a worker pool can run cells in parallel;
    each worker owns private model handles loaded from disk.
    """
    cfg = RunConfig(cfg_values)
    paths = artifact_paths(cfg)
    spec = ScenarioSpec(**spec_kw)
    classifier = Classifier.load(require(paths, "classifier"))
    model_era = NeuralDenoiser.load(paths["std"] if eraser == "none" else require(paths, "erased"))
    model_sur = NeuralDenoiser.load(require(paths, "surrogate"))
    refs = bench.reference_images(spec.concept, cfg.n_refs, cfg.root_seed)
    report = run_scenario(
        spec,
        model_era,
        model_sur,
        classifier,
        refs,
        ti_config=ti_config(cfg),
        irece_config=irece_config(cfg),
        defense_target=cfg.erase_target,
        adversarial_prompt_file=cfg.adversarial_prompt_file or None,
        guidance=cfg.guidance,
        config_hash=cfg.content_hash(),
        sched=schedule_of(cfg),
    )
    return report_row(eraser, spec, report)


# -- click wiring ----------------------------------------------------------


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON config file.")
@click.option("--set", "overrides", multiple=True, help="Override as key=value (repeatable).")
@click.pass_context
def main(ctx, config_path, overrides):
    """Concept-erasure test bench."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["overrides"] = list(overrides)


def build_cfg(ctx, drop=()) -> RunConfig:
    overrides = [o for o in ctx.obj["overrides"] if o.split("=", 1)[0] not in drop]
    return RunConfig.load(ctx.obj["config_path"], overrides)


@main.command("train-denoiser")
@click.option(
    "--role",
    type=click.Choice(["std", "surrogate", "surrogate-wide", "all"]),
    default="all",
    show_default=True,
)
@click.pass_context
def cmd_train_denoiser(ctx, role):
    """Train the standard model and its black-box surrogates."""
    cfg = build_cfg(ctx)
    paths = artifact_paths(cfg)
    base = train_config(cfg)
    jobs = {
        "std": base,
        "surrogate": surrogate_config(base),
        "surrogate-wide": surrogate_config(base, different_backbone=True),
    }
    wanted = list(jobs) if role == "all" else [role]
    for name in wanted:
        out = paths[name.replace("-", "_")]
        out.parent.mkdir(parents=True, exist_ok=True)
        _, curve = train_denoiser(jobs[name], out_path=out)
        write_loss_curve(out.with_suffix(".loss.csv"), curve)
        click.echo(f"{name}: {out} (final loss {curve[-1][1]:.4f})")


@main.command("train-classifier")
@click.pass_context
def cmd_train_classifier(ctx):
    """Train and validate the concept detector."""
    cfg = build_cfg(ctx)
    paths = artifact_paths(cfg)
    paths["classifier"].parent.mkdir(parents=True, exist_ok=True)
    clf = train_classifier(
        ClassifierConfig(
            epochs=cfg.classifier_epochs,
            samples_per_concept=cfg.classifier_samples,
            hidden=cfg.classifier_hidden,
            seed=cfg.root_seed,
        ),
        out_path=paths["classifier"],
    )
    click.echo(f"classifier: {paths['classifier']} (holdout {clf.metadata['holdout_accuracy']:.3f})")


@main.command("gen-data")
@click.pass_context
def cmd_gen_data(ctx):
    """Sample the reference dataset from the standard model."""
    cfg = build_cfg(ctx)
    paths = artifact_paths(cfg)
    model = NeuralDenoiser.load(require(paths, "std"))
    manifest = bench.build_normal_dataset(
        model,
        concepts=cfg.concept_list(),
        seeds=tuple(range(cfg.dataset_seeds)),
        out_dir=paths["data"],
        guidance=cfg.guidance,
        sched=schedule_of(cfg),
    )
    click.echo(f"dataset: {paths['data']} ({len(manifest)} images)")


@main.command("erase")
@click.pass_context
def cmd_erase(ctx):
    """Apply the configured eraser to the standard model."""
    cfg = build_cfg(ctx)
    paths = artifact_paths(cfg)
    model = NeuralDenoiser.load(require(paths, "std"))
    spec = ErasureSpec(
        method=cfg.eraser,
        target=cfg.erase_target,
        anchor=cfg.erase_anchor,
        strength=cfg.erase_strength,
        epochs=cfg.erase_epochs,
        lr=cfg.erase_lr,
        seed=cfg.root_seed,
    )
    erased = erase(model, spec)
    paths["erased"].parent.mkdir(parents=True, exist_ok=True)
    erased.save(paths["erased"])
    click.echo(f"erased: {paths['erased']}")


@main.command("ti")
@click.option("--mode", type=click.Choice(list(bench.EMBEDDING_MODES)), default="white_box", show_default=True)
@click.pass_context
def cmd_ti(ctx, mode):
    """Learn an attack embedding for the erased concept."""
    cfg = build_cfg(ctx)
    paths = artifact_paths(cfg)
    tic = ti_config(cfg)
    model = NeuralDenoiser.load(
        require(paths, "erased") if mode == "white_box" else require(paths, "surrogate")
    )
    refs = bench.reference_images(cfg.erase_target, cfg.n_refs, cfg.root_seed)
    if mode == "black_box_perturbed":
        from .ti import DEFAULT_BUDGET, perturb_references

        refs = perturb_references(refs, DEFAULT_BUDGET, tic.seed)
    e_star, curve = ti_learn(refs, tic.template, model, tic)
    paths["embeddings"].mkdir(parents=True, exist_ok=True)
    out = paths["embeddings"] / f"ti_{mode}_{cfg.erase_target}.json"
    save_embedding(out, cfg.erase_target, e_star, model.param_hash(), tic)
    click.echo(f"embedding: {out} (final loss {curve[-1][1]:.4f})")


@main.command("eval")
@click.option("--jobs", type=int, default=None, help="Worker pool size; 1 = bit-exact mode.")
@click.pass_context
def cmd_eval(ctx, jobs):
    """Run the full evaluation matrix and write one CSV per cell."""
    cfg = build_cfg(ctx)
    paths = artifact_paths(cfg)
    require(paths, "classifier")
    require(paths, "std")
    require(paths, "surrogate")
    require(paths, "erased")
    jobs = jobs if jobs is not None else cfg.jobs

    seeds = tuple(range(cfg.cell_seeds))
    work = []
    for concept in cfg.concept_list():
        # undefended baseline: the standard model on target text prompts
        work.append(("none", ScenarioSpec("text", concept, seeds)))
        for spec in full_matrix(concept, seeds):
            work.append((cfg.eraser, spec))

    cfg_values = cfg.as_dict()
    paths["cells"].mkdir(parents=True, exist_ok=True)
    if jobs <= 1:
        rows = [_run_cell(cfg_values, eraser, spec.__dict__) for eraser, spec in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_run_cell, cfg_values, eraser, spec.__dict__) for eraser, spec in work
            ]
            rows = [f.result() for f in futures]
    for (eraser, spec), row in zip(work, rows):
        write_report(paths["cells"] / cell_filename(eraser, spec), [row])
    click.echo(f"cells: {paths['cells']} ({len(rows)} cells)")


@main.command("sweep-irece")
@click.pass_context
def cmd_sweep_irece(ctx):
    """Grid the defense over tau x tstar on the strongest attack cell."""
    taus, tstars = None, None
    for item in ctx.obj["overrides"]:
        key, _, raw = item.partition("=")
        if key == "tau":
            taus = [float(v) for v in raw.split(",")]
        elif key == "tstar":
            tstars = [int(v) for v in raw.split(",")]
    cfg = build_cfg(ctx, drop=("tau", "tstar"))
    taus = taus or [cfg.tau]
    tstars = tstars or [cfg.tstar]

    paths = artifact_paths(cfg)
    classifier = Classifier.load(require(paths, "classifier"))
    model_era = NeuralDenoiser.load(require(paths, "erased"))
    model_sur = NeuralDenoiser.load(require(paths, "surrogate"))
    concept = cfg.erase_target
    refs = bench.reference_images(concept, cfg.n_refs, cfg.root_seed)
    seeds = tuple(range(cfg.cell_seeds))
    sched = schedule_of(cfg)

    rows = []
    for tau in taus:
        for tstar in tstars:
            report = bench.run_latent_inversion_eval(
                model_era,
                model_sur,
                refs,
                "white_box",
                "",
                classifier,
                concept,
                seeds=seeds,
                irece=True,
                irece_config=irece_config(cfg, tau=tau, tstar=tstar),
                guidance=cfg.guidance,
                config_hash=cfg.content_hash(),
                sched=sched,
            )
            rows.append(
                {
                    "tau": tau,
                    "tstar": tstar,
                    "concept": concept,
                    "n": report.total,
                    "detected": report.detected,
                    "crr": report.crr_rounded,
                    "config_hash": report.config_hash,
                }
            )
    paths["sweep"].parent.mkdir(parents=True, exist_ok=True)
    with open(paths["sweep"], "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["tau", "tstar", "concept", "n", "detected", "crr", "config_hash"])
        w.writeheader()
        for row in rows:
            w.writerow(row)
    click.echo(f"sweep: {paths['sweep']} ({len(rows)} cells)")


@main.command("report")
@click.pass_context
def cmd_report(ctx):
    """Merge per-cell CSVs into one table ordered by cell file name."""
    cfg = build_cfg(ctx)
    paths = artifact_paths(cfg)
    cell_files = sorted(paths["cells"].glob("*.csv"))
    if not cell_files:
        raise DependencyError(f"no cell files under {paths['cells']}; run `eval` first")
    rows = []
    for path in cell_files:
        with open(path) as f:
            rows.extend(csv.DictReader(f))
    write_report(paths["report"], rows)
    click.echo(f"report: {paths['report']} ({len(rows)} rows)")


def run() -> None:
    """Console entry point mapping exceptions to exit codes."""
    try:
        main(standalone_mode=False)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(2)
    except DependencyError as e:
        click.echo(f"dependency error: {e}", err=True)
        sys.exit(3)
    except (TrainingError, NumericError) as e:
        click.echo(f"numeric/training error: {e}", err=True)
        sys.exit(4)
    except click.ClickException as e:
        e.show()
        sys.exit(e.exit_code)
    except click.exceptions.Abort:
        sys.exit(1)


if __name__ == "__main__":
    run()
