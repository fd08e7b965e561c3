import logging

import matplotlib.pyplot as plt
import pytest

from app.exceptions import ReportParseError
from app.plotting import cmd_plot, parse_report, render_chart

REPORT = """# config_hash: abc
# scale: desk
variant,conditioning,status,batches,fad_mean,fad_std,cs_ta_mean,cs_ta_std
real,-,ok,5,0.100000,0.010000,0.400000,0.020000
c-dit,style+ctx,ok,5,0.300000,0.050000,,
bridge,style,absent,0,,,,
"""


def test_parse_report_reads_header_metrics_and_rows():
    report = parse_report(REPORT)
    assert report.header == {"config_hash": "abc", "scale": "desk"}
    assert report.metrics == ["fad", "cs_ta"]
    assert [row.variant for row in report.rows] == ["real", "c-dit", "bridge"]
    assert report.rows[1].values["fad_mean"] == pytest.approx(0.3)
    assert report.rows[1].values["cs_ta_mean"] is None
    assert report.rows[2].status == "absent"


def test_render_chart_draws_one_bar_per_filled_cell():
    report = parse_report(REPORT)
    fig = render_chart(report, "fad")
    assert len(fig.axes[0].patches) == 2
    plt.close(fig)
    cs_ta = render_chart(report, "cs_ta")
    assert len(cs_ta.axes[0].patches) == 1
    plt.close(cs_ta)


def test_empty_metric_columns_are_skipped(tmp_path, caplog):
    path = tmp_path / "report.csv"
    path.write_text(
        "variant,conditioning,fad_mean,fad_std,kd_mean,kd_std\n"
        "real,-,0.1,0.0,,\n"
    )
    with caplog.at_level(logging.WARNING):
        written = cmd_plot(path, tmp_path / "charts")
    assert [p.name for p in written] == ["fad.svg"]
    assert "kd" in caplog.text


def test_charts_are_byte_identical_across_runs(tmp_path):
    path = tmp_path / "report.csv"
    path.write_text(REPORT)
    first = cmd_plot(path, tmp_path / "a")
    second = cmd_plot(path, tmp_path / "b")
    assert [p.name for p in first] == ["fad.svg", "cs_ta.svg"]
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()


def test_wrong_field_count_names_the_line():
    text = REPORT.replace("real,-,ok,5,0.100000", "real,-,ok,5")
    with pytest.raises(ReportParseError) as excinfo:
        parse_report(text)
    assert excinfo.value.line_number == 4


def test_non_numeric_value_names_the_line():
    text = REPORT.replace("0.300000", "lots")
    with pytest.raises(ReportParseError) as excinfo:
        parse_report(text)
    assert excinfo.value.line_number == 5


def test_missing_columns_are_rejected():
    with pytest.raises(ReportParseError) as excinfo:
        parse_report("variant,status,fad_mean\nreal,ok,0.1\n")
    assert excinfo.value.line_number == 1
    with pytest.raises(ReportParseError):
        parse_report("variant,conditioning,status\nreal,-,ok\n")
    with pytest.raises(ReportParseError):
        parse_report("# only: metadata\n")
