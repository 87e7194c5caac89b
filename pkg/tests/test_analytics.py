"""Routing analytics: NRE/TEC anchors, matrices, rendering, trace files."""

import json

import numpy as np
import pytest

from patchmoe.analytics import (
    RoutingTrace,
    TRACE_FIELDS,
    class_expert_heatmap,
    co_routing_matrix,
    export_csvs,
    format_trace_line,
    nre,
    read_trace_file,
    render_heatmap,
    tec,
    trace_from_records,
)
from patchmoe.errors import ConfigError, DataError
from patchmoe.moe import RoutingDecision
from patchmoe.netpbm import read_ppm


def test_nre_tec_anchors():
    assert abs(nre([5, 5, 5, 5]) - 1.0) < 1e-12
    assert abs(tec([5, 5, 5, 5]) - 0.25) < 1e-12
    assert nre([7, 0, 0]) == 0.0
    assert tec([7, 0, 0]) == 1.0
    assert abs(nre([3, 1]) - 0.8112781) < 1e-6
    assert abs(tec([3, 1]) - 0.75) < 1e-12


def test_nre_is_monotone_toward_uniform():
    values = [nre([c, 10 - c]) for c in range(5, 10)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_nre_tec_input_validation():
    with pytest.raises(DataError):
        nre([0, 0])
    with pytest.raises(DataError):
        tec([0.0, 0.0])
    with pytest.raises(ConfigError):
        nre([4])


def test_trace_counting_oracle():
    trace = RoutingTrace(n_experts=4, n_classes=2)
    trace.add([0, 1], np.array([0.5, 0.5]))
    trace.add([1, 2], np.array([1.0, 0.0]))
    trace.add([1, 3], np.array([0.0, 1.0]))
    assert trace.n_decisions == 3
    assert np.array_equal(trace.expert_counts, [1, 3, 1, 1])
    assert np.array_equal(trace.class_expert_counts[:, 1], [1.5, 1.5])
    assert trace.cooccur_counts[0, 1] == 1 and trace.cooccur_counts[1, 0] == 1
    assert trace.cooccur_counts[1, 2] == 1 and trace.cooccur_counts[1, 3] == 1
    assert np.trace(trace.cooccur_counts) == 0


def test_co_routing_matrix_is_normalized_and_symmetric():
    trace = RoutingTrace(n_experts=3, n_classes=1)
    for _ in range(4):
        trace.add([0, 2])
    co = co_routing_matrix(trace)
    assert np.array_equal(co, co.T)
    assert co[0, 2] == 1.0
    assert co[0, 1] == 0.0
    with pytest.raises(DataError):
        co_routing_matrix(RoutingTrace(n_experts=3, n_classes=1))


def test_class_expert_heatmap_rows_are_distributions():
    trace = RoutingTrace(n_experts=3, n_classes=3)
    trace.add([0], np.array([0.25, 0.75, 0.0]))
    trace.add([2], np.array([0.5, 0.5, 0.0]))
    heat = class_expert_heatmap(trace)
    assert np.allclose(heat[:2].sum(axis=1), 1.0)
    assert np.allclose(heat[2], 0.0)  # class never seen stays all-zero


def test_monte_carlo_uniform_routing_converges_to_nre_one():
    rng = np.random.default_rng(60)
    trace = RoutingTrace(n_experts=4, n_classes=1)
    for _ in range(4000):
        trace.add([int(rng.integers(0, 4))])
    assert nre(trace.expert_counts) > 0.995
    assert abs(tec(trace.expert_counts) - 0.25) < 0.03


def test_render_heatmap_pixels_and_determinism(tmp_path):
    mat = np.array([[0.0, 1.0], [0.5, 0.25]])
    p1 = tmp_path / "a.ppm"
    p2 = tmp_path / "b.ppm"
    render_heatmap(mat, str(p1))
    render_heatmap(mat, str(p2))
    assert p1.read_bytes() == p2.read_bytes()
    img = read_ppm(str(p1))
    assert img.shape == (64, 64, 3)  # 2x2 cells of 32px
    assert np.array_equal(img[0, 0], [0, 0, 0])  # t=0 renders black
    assert np.array_equal(img[0, 63], [255, 255, 255])  # t=1 renders white
    # the ramp is monotone: larger value -> brighter pixel sum
    t_half = img[32, 0].astype(int).sum()
    t_quarter = img[32, 63].astype(int).sum()
    assert 0 < t_quarter < t_half < 3 * 255


def test_render_heatmap_validates_input(tmp_path):
    with pytest.raises(DataError):
        render_heatmap(np.array([1.0, 2.0]), str(tmp_path / "x.ppm"))
    with pytest.raises(DataError):
        render_heatmap(np.array([[-1.0]]), str(tmp_path / "x.ppm"))
    with pytest.raises(DataError):
        render_heatmap(np.array([[np.nan]]), str(tmp_path / "x.ppm"))


def make_decision(b=0, p=0, ids=(1, 0)):
    full = np.array([0.4, 0.5, 0.1])
    return RoutingDecision(b, p, list(ids), full[list(ids)], full)


def test_trace_line_format_and_field_order():
    line = format_trace_line(3, make_decision(), np.array([0.5, 0.5]))
    rec = json.loads(line)
    assert tuple(rec)[: len(TRACE_FIELDS)] == TRACE_FIELDS
    assert rec["step"] == 3 and rec["expert_ids"] == [1, 0]
    assert rec["class_fractions"] == [0.5, 0.5]
    bare = json.loads(format_trace_line(0, make_decision()))
    assert "class_fractions" not in bare


def test_trace_file_roundtrip_and_validation(tmp_path):
    path = tmp_path / "trace.jsonl"
    with open(path, "w") as f:
        for step in range(3):
            f.write(format_trace_line(step, make_decision(p=step), np.array([1.0, 0.0])) + "\n")
    records = read_trace_file(str(path))
    assert len(records) == 3
    trace = trace_from_records(records, 2)
    assert trace.n_decisions == 3
    assert np.array_equal(trace.expert_counts, [3, 3, 0])

    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"step": 0}\n')
    with pytest.raises(DataError):
        read_trace_file(str(bad))
    with pytest.raises(DataError):
        trace_from_records([], 2)
    with pytest.raises(DataError):
        trace_from_records(records, 5)  # class_fractions length mismatch


def test_export_csvs(tmp_path):
    trace = RoutingTrace(n_experts=3, n_classes=2)
    trace.add([0, 1], np.array([1.0, 0.0]))
    trace.add([0, 2], np.array([0.0, 1.0]))
    export_csvs(trace, str(tmp_path))
    counts = (tmp_path / "expert_counts.csv").read_text().strip().split("\n")
    assert counts[0] == "expert_0,expert_1,expert_2"
    assert [float(x) for x in counts[1].split(",")] == [2.0, 1.0, 1.0]
    heat = (tmp_path / "class_expert.csv").read_text().strip().split("\n")
    assert heat[0] == "class,expert_0,expert_1,expert_2"
    assert len(heat) == 3
    co = (tmp_path / "cooccur.csv").read_text().strip().split("\n")
    assert len(co) == 4
