import pytest
import torch

from app.ablation import cmd_ablate, load_variant_models, report_header, write_report
from app.config import BRIDGE, C_DIT, CONDITIONINGS, DIT_DIFFUSION
from app.exceptions import ConfigMismatchError
from app.generation_service import BRIDGE_CONDITIONINGS, VariantModels
from app.metrics import BASE_METRICS
from app.training import Trainer, build_model

from tests.factories import tiny_experiment, tiny_synth


@pytest.fixture
def models(tiny_config) -> VariantModels:
    torch.manual_seed(0)
    return VariantModels(
        dit=build_model(tiny_config, DIT_DIFFUSION),
        cdit=build_model(tiny_config, C_DIT),
        bridge=build_model(tiny_config, BRIDGE),
    )


def test_full_grid_is_bounded_by_real_and_noise_rows(tiny_config, tmp_path, models):
    report = cmd_ablate(tiny_config, tmp_path, 0, models=models)
    rows = [(cell.variant, cell.conditioning) for cell in report.cells]
    assert rows[0] == ("real", "-")
    assert rows[-2:] == [("noise", "-"), ("shuffled", "-")]
    assert len(rows) == 2 * len(CONDITIONINGS) + len(BRIDGE_CONDITIONINGS) + 3

    bridge_rows = [conditioning for variant, conditioning in rows if variant == BRIDGE]
    assert bridge_rows == [c for c in CONDITIONINGS if c in BRIDGE_CONDITIONINGS]
    assert all(cell.status == "ok" for cell in report.cells)

    real, noise = report.cell("real", "-"), report.cell("noise", "-")
    assert real.means["fad"] < noise.means["fad"]
    assert real.means["coverage"] > 0.0
    assert noise.means["coverage"] == 0.0
    assert noise.means["density"] == 0.0
    assert real.batches == tiny_config.evaluation.batches


def test_shuffled_row_only_reports_pairing_scores(tiny_config, tmp_path, models):
    report = cmd_ablate(tiny_config, tmp_path, 0, variants=(C_DIT,), models=models)
    shuffled = report.cell("shuffled", "-")
    assert shuffled.means["cs_ta"] is not None
    assert all(shuffled.means[name] is None for name in BASE_METRICS if name != "cs_ta")


def test_missing_models_mark_cells_absent(tiny_config, tmp_path):
    report = cmd_ablate(tiny_config, tmp_path, 0, models=VariantModels())
    model_cells = [cell for cell in report.cells if cell.variant in (DIT_DIFFUSION, C_DIT, BRIDGE)]
    assert len(model_cells) == 2 * len(CONDITIONINGS) + len(BRIDGE_CONDITIONINGS)
    assert all(cell.status == "absent" and cell.batches == 0 for cell in model_cells)
    assert report.cell("real", "-").status == "ok"


def test_checkpoints_from_other_data_are_rejected(tiny_config, tmp_path):
    other = tiny_experiment(synth=tiny_synth(seed=1))
    Trainer(other, DIT_DIFFUSION, 0, tmp_path).train(steps=1)
    with pytest.raises(ConfigMismatchError):
        load_variant_models(tiny_config, tmp_path, 0)


def test_missing_checkpoints_load_as_none(tiny_config, tmp_path):
    Trainer(tiny_config, C_DIT, 0, tmp_path).train(steps=1)
    models = load_variant_models(tiny_config, tmp_path, 0)
    assert models.cdit is not None
    assert models.dit is None and models.bridge is None


def test_report_files_are_deterministic(tiny_config, tmp_path, models):
    first = write_report(cmd_ablate(tiny_config, tmp_path, 0, variants=(C_DIT,), models=models), tmp_path / "a")
    second = write_report(cmd_ablate(tiny_config, tmp_path, 0, variants=(C_DIT,), models=models), tmp_path / "b")
    assert [path.name for path in first] == ["report.csv", "report.txt"]
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()
    assert f"# config_hash: {tiny_config.config_hash}" in first[0].read_text().splitlines()


def test_report_header_names_the_scale(tiny_config):
    header = report_header(tiny_config)
    assert header["scale"] == "desk"
    assert header["data_hash"] == tiny_config.data_hash
