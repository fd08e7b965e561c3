import json

import pytest

from app.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, main
from app.embedding_store import HEADER, read_embeddings

from tests.factories import tiny_experiment


@pytest.fixture
def config_path(tmp_path):
    return str(tiny_experiment().save(tmp_path / "config.json"))


def test_unknown_command_is_a_usage_error():
    assert main(["compose"]) == EXIT_USAGE


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == EXIT_OK


def test_unknown_config_key_is_a_usage_error(tmp_path):
    path = tmp_path / "config.json"
    data = json.loads(tiny_experiment().model_dump_json())
    data["temperature"] = 0.7
    path.write_text(json.dumps(data))
    assert main(["gen-data", "--config", str(path), "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_config_file_is_an_io_error(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_IO


def test_missing_report_is_an_io_error(tmp_path, config_path):
    assert main(["plot", "--config", config_path, "--out", str(tmp_path / "empty")]) == EXIT_IO


def test_malformed_report_is_an_io_error(tmp_path, config_path):
    report = tmp_path / "report.csv"
    report.write_text("variant,conditioning,fad_mean\nreal,-\n")
    assert main(["plot", "--config", config_path, "--out", str(tmp_path), "--report", str(report)]) == EXIT_IO


def test_negative_count_is_a_usage_error(tmp_path, config_path):
    assert main(["sample", "--config", config_path, "--out", str(tmp_path), "--count", "-1"]) == EXIT_USAGE


def test_gen_data_writes_manifest_and_embeddings(tmp_path, config_path):
    assert main(["gen-data", "--config", config_path, "--out", str(tmp_path)]) == EXIT_OK
    data = tmp_path / "data"
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["data_hash"] == tiny_experiment().data_hash
    assert len(read_embeddings(data / "reference.emb")) == 40
    assert len(read_embeddings(data / "pairs_text.emb")) == len(read_embeddings(data / "pairs_audio.emb")) == 20


def test_train_sample_ablate_plot_pipeline(tmp_path, config_path):
    out = str(tmp_path)
    common = ["--config", config_path, "--out", out, "--seed", "0"]
    assert main(["train", *common, "--variant", "c-dit", "--steps", "3"]) == EXIT_OK
    assert (tmp_path / "c-dit_seed0.lcl").exists()

    assert main(["sample", *common, "--variant", "c-dit", "--conditioning", "style", "--count", "0"]) == EXIT_OK
    empty = tmp_path / "samples" / "c-dit_style_seed0.emb"
    assert empty.stat().st_size == HEADER.size

    assert main(["sample", *common, "--variant", "c-dit", "--conditioning", "ctx", "--count", "2"]) == EXIT_OK
    assert len(read_embeddings(tmp_path / "samples" / "c-dit_ctx_seed0.emb")) == 2

    assert main(["sample", *common, "--variant", "bridge", "--conditioning", "ctx", "--count", "2"]) == EXIT_USAGE
    assert main(["bridge-sample", *common, "--count", "2"]) == EXIT_USAGE

    assert main(["ablate", *common]) == EXIT_OK
    assert "absent" in (tmp_path / "report.csv").read_text()
    assert main(["plot", *common]) == EXIT_OK
    assert (tmp_path / "charts" / "fad.svg").exists()


def test_bridge_train_writes_gap_report(tmp_path, config_path):
    common = ["--config", config_path, "--out", str(tmp_path), "--seed", "0"]
    assert main(["bridge-train", *common, "--steps", "2"]) == EXIT_OK
    report = json.loads((tmp_path / "gap_report_seed0.json").read_text())
    assert {"centroid_distance_before", "centroid_distance_after", "config_hash"} <= set(report)

    assert main(["bridge-sample", *common, "--count", "3"]) == EXIT_OK
    assert len(read_embeddings(tmp_path / "samples" / "bridge_seed0.emb")) == 3


@pytest.mark.slow
def test_whole_pipeline_is_byte_reproducible(tmp_path, config_path):
    def run(out) -> dict:
        common = ["--config", config_path, "--out", str(out), "--seed", "0"]
        assert main(["gen-data", *common]) == EXIT_OK
        for variant in ("dit-diffusion", "c-dit"):
            assert main(["train", *common, "--variant", variant, "--steps", "500"]) == EXIT_OK
        assert main(["bridge-train", *common, "--steps", "500"]) == EXIT_OK
        assert main(["sample", *common, "--variant", "c-dit", "--conditioning", "style+ctx", "--count", "4"]) == EXIT_OK
        assert main(["ablate", *common]) == EXIT_OK
        names = ["report.csv", "report.txt", "samples/c-dit_style+ctx_seed0.emb", "data/reference.emb"]
        return {name: (out / name).read_bytes() for name in names}

    first, second = run(tmp_path / "a"), run(tmp_path / "b")
    assert first == second
    assert b"absent" not in first["report.csv"]
