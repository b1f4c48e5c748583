"""Unit tests for the evaluation bench: scenario validation, CRR
arithmetic, prompt-file parsing, and matrix assembly.

End-to-end bench behavior on trained models lives in the acceptance
suite; everything here runs without training.
"""

import numpy as np
import pytest

from cebench.bench import (
    CELL_SEEDS,
    EMBEDDING_MODES,
    LATENT_STRATEGIES,
    REPORT_COLUMNS,
    CrrReport,
    ScenarioSpec,
    compute_crr,
    detect,
    full_matrix,
    parse_prompt_file,
    report_row,
    round_crr,
    strategy_prompt,
    surrogate_config,
    write_report,
)
from cebench.errors import ContractError, DependencyError, ParameterError
from cebench.prompts import CONCEPTS, NULL_ID
from cebench.trainer import TrainConfig

SEEDS = (0, 1, 2)


# -- ScenarioSpec ------------------------------------------------------------


def test_scenario_text_valid():
    spec = ScenarioSpec("text", "square", SEEDS)
    assert spec.access is None and spec.prompt_strategy is None


@pytest.mark.parametrize(
    "kw",
    [
        dict(modality="voice", concept="square", seeds=SEEDS),
        dict(modality="text", concept="triangle", seeds=SEEDS),
        dict(modality="text", concept="square", seeds=()),
        # text carries no access mode
        dict(modality="text", concept="square", seeds=SEEDS, access="white_box"),
        # strategy present iff latent inversion
        dict(modality="text", concept="square", seeds=SEEDS, prompt_strategy=""),
        dict(modality="learned_embedding", concept="square", seeds=SEEDS, access="white_box", prompt_strategy="image"),
        dict(modality="latent_inversion", concept="square", seeds=SEEDS, access="white_box"),
        # perturbed mode is embedding-only
        dict(modality="latent_inversion", concept="square", seeds=SEEDS, access="black_box_perturbed", prompt_strategy=""),
        dict(modality="learned_embedding", concept="square", seeds=SEEDS, access=None),
        # the defense applies to latent inversion cells only
        dict(modality="text", concept="square", seeds=SEEDS, irece=True),
        dict(modality="learned_embedding", concept="square", seeds=SEEDS, access="white_box", irece=True),
    ],
)
def test_scenario_invalid(kw):
    with pytest.raises(ParameterError):
        ScenarioSpec(**kw)


def test_scenario_embedding_all_modes_valid():
    for mode in EMBEDDING_MODES:
        ScenarioSpec("learned_embedding", "disc", SEEDS, access=mode)


def test_scenario_latent_all_strategies_valid():
    for access in ("white_box", "black_box"):
        for strategy in LATENT_STRATEGIES:
            for irece in (False, True):
                ScenarioSpec(
                    "latent_inversion", "bar", SEEDS, access=access, prompt_strategy=strategy, irece=irece
                )


def test_cell_ids_unique():
    ids = [s.cell_id() for s in full_matrix("cross", SEEDS)]
    assert len(ids) == len(set(ids))


# -- CRR arithmetic ----------------------------------------------------------


def test_compute_crr_examples():
    assert compute_crr([True, True, False, False]) == 50.0
    assert compute_crr([False] * 7) == 0.0
    assert compute_crr([True] * 3) == 100.0


def test_compute_crr_empty_rejected():
    with pytest.raises(ContractError):
        compute_crr([])


def test_round_crr_half_up():
    assert round_crr(50.0) == "50.00"
    # exact .005 ties round away from zero, not to even
    assert round_crr(2.125) == "2.13"
    assert round_crr(2.135) == "2.14"
    assert round_crr(1.0 / 3.0 * 100.0) == "33.33"


def test_crr_report_invariants():
    rep = CrrReport(detected=3, total=10)
    assert rep.crr == 30.0
    assert rep.crr_rounded == "30.00"
    with pytest.raises(ParameterError):
        CrrReport(detected=1, total=0)
    with pytest.raises(ParameterError):
        CrrReport(detected=5, total=4)
    with pytest.raises(ParameterError):
        CrrReport(detected=-1, total=4)


def test_crr_full_precision_internally():
    rep = CrrReport(detected=1, total=3)
    assert abs(rep.crr - 100.0 / 3.0) < 1e-12
    assert rep.crr_rounded == "33.33"


# -- prompt files ------------------------------------------------------------


def test_parse_prompt_file_skips_comments_and_blanks(tmp_path):
    p = tmp_path / "adv.txt"
    p.write_text("# header\n\na photo of a square\nimage\n")
    prompts = parse_prompt_file(p)
    assert len(prompts) == 2


def test_parse_prompt_file_reports_line_number(tmp_path):
    p = tmp_path / "adv.txt"
    p.write_text("a photo of a square\nnot-a-token here\n")
    with pytest.raises(ContractError, match="line 2"):
        parse_prompt_file(p)


def test_parse_prompt_file_rejects_templates(tmp_path):
    p = tmp_path / "adv.txt"
    p.write_text("a photo of {}\n")
    with pytest.raises(ContractError, match="line 1"):
        parse_prompt_file(p)


# -- strategy prompts --------------------------------------------------------


def test_strategy_prompt_null():
    assert strategy_prompt("", "square").token_ids == (NULL_ID,)


def test_strategy_prompt_coarse_and_target():
    assert len(strategy_prompt("image", "square").token_ids) == 1
    cond = strategy_prompt("target", "disc")
    assert cond.concept_position() is not None


def test_strategy_prompt_rejects_unknown():
    with pytest.raises(ParameterError):
        strategy_prompt("banana", "square")


# -- matrix assembly ---------------------------------------------------------


def test_full_matrix_counts():
    cells = full_matrix("square", SEEDS)
    # 1 text + 3 embedding + 8 latent + 8 defended latent
    assert len(cells) == 20
    assert sum(c.modality == "text" for c in cells) == 1
    assert sum(c.modality == "learned_embedding" for c in cells) == 3
    assert sum(c.modality == "latent_inversion" for c in cells) == 16
    assert sum(c.irece for c in cells) == 8


def test_full_matrix_without_defense():
    assert len(full_matrix("square", SEEDS, with_irece=False)) == 12


def test_report_row_columns(tmp_path):
    spec = ScenarioSpec("latent_inversion", "bar", SEEDS, access="white_box", prompt_strategy="")
    rep = CrrReport(detected=8, total=20, config_hash="abc123")
    row = report_row("negative_guidance_finetune", spec, rep)
    assert tuple(row) == REPORT_COLUMNS
    assert row["crr"] == "40.00"
    assert row["irece"] == 0 and row["access"] == "white_box" and row["strategy"] == ""
    write_report(tmp_path / "r.csv", [row])
    lines = (tmp_path / "r.csv").read_text().strip().split("\n")
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert len(lines) == 2


def test_default_cell_size_is_40_samples():
    # 2 templates x 20 seeds; CRR granularity 2.5%
    assert len(CELL_SEEDS) == 20


# -- misc helpers ------------------------------------------------------------


def test_surrogate_config_changes_seed_only():
    base = TrainConfig(epochs=1)
    sur = surrogate_config(base)
    assert sur.seed != base.seed and sur.width == base.width
    wide = surrogate_config(base, different_backbone=True)
    assert wide.width == 2 * base.width


def test_detect_requires_validated_classifier():
    from cebench.bench import check_classifier

    class Fake:
        metadata = {}

    with pytest.raises(DependencyError):
        check_classifier(Fake())

    class Low:
        metadata = {"holdout_accuracy": 0.5}

    with pytest.raises(DependencyError):
        check_classifier(Low())


def test_detect_decision_rule():
    class Stub:
        def classify(self, images):
            return np.array([0, 1, 4, 0]), np.array([0.9, 0.9, 0.99, 0.3])

    decisions = detect(Stub(), np.zeros((4, 1, 16, 16), dtype=np.float32), CONCEPTS[0])
    # concept index 0: hit needs label 0 and confidence >= 0.5
    assert decisions == [True, False, False, False]
