import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adamole.errors import ConfigError, ShapeError
from adamole.model import ToyModel, ToyModelConfig
from adamole.oracle import replay_average, replay_overall
from adamole.telemetry import ActivationStats, export_csv, merge, preferred_expert_entropy, record

streams = st.lists(st.tuples(st.integers(0, 2), st.sampled_from("qkvo"), st.integers(0, 8)), max_size=60)


def feed(stream):
    s = ActivationStats(3, 8)
    for layer, proj, count in stream:
        record(s, layer, proj, count)
    return s


@given(streams)
def test_averages_equal_replay(stream):
    s = feed(stream)
    assert s.averages() == replay_average(stream)
    assert s.overall_average() == replay_overall(stream)


@given(streams, st.randoms())
def test_order_does_not_matter(stream, rnd):
    shuffled = list(stream)
    rnd.shuffle(shuffled)
    assert feed(shuffled).to_csv() == feed(stream).to_csv()


@given(streams, streams)
def test_merge_is_concatenation(a, b):
    assert merge(feed(a), feed(b)).to_csv() == feed(a + b).to_csv()
    assert merge(feed(a), feed(b)).averages() == merge(feed(b), feed(a)).averages()


def test_small_examples():
    assert feed([]).averages() == {} and feed([]).overall_average() is None
    assert feed([(1, "v", 5)]).average(1, "v") == 5.0
    s = ActivationStats(1, 8)
    s.record(0, "q", np.array([2, 3, 4]))
    assert s.average(0, "q") == 3.0


def test_single_record_row():
    s = ActivationStats(1, 8)
    s.record(0, "q", 3)
    assert s.to_csv().splitlines()[1] == "0,q,3.0000,1"


@given(streams)
def test_csv_parses_back_to_the_averages(stream):
    s = feed(stream)
    parsed = {(int(r["layer"]), r["projection"]): float(r["avg_active"])
              for r in csv.DictReader(io.StringIO(s.to_csv())) if r["avg_active"]}
    assert parsed.keys() == s.averages().keys()
    for cell, avg in s.averages().items():
        assert parsed[cell] == pytest.approx(avg, abs=5e-5)


def test_rejects_bad_records():
    s = ActivationStats(2, 4)
    with pytest.raises(ConfigError):
        s.record(0, "z", 1)
    with pytest.raises(ConfigError):
        s.record(2, "q", 1)
    with pytest.raises(ConfigError):
        s.record(0, "q", 5)
    with pytest.raises(ShapeError):
        s.merge(ActivationStats(3, 4))


def test_csv_layout(tmp_path):
    s = feed([(0, "k", 3), (0, "k", 4), (2, "o", 1)])
    rows = list(csv.reader(io.StringIO(s.to_csv())))
    assert rows[0] == ["layer", "projection", "avg_active", "observations"]
    assert [r[:2] for r in rows[1:5]] == [["0", "q"], ["0", "k"], ["0", "v"], ["0", "o"]]
    assert rows[2] == ["0", "k", "3.5000", "2"]
    assert rows[1] == ["0", "q", "", "0"]
    assert len(rows) == 1 + 3 * 4
    export_csv(s, tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text() == s.to_csv()
    assert ActivationStats.from_dict(s.to_dict()).to_csv() == s.to_csv()


def test_record_all_from_model():
    cfg = ToyModelConfig(n_layers=2, d_model=8, vocab_size=16, seq_len=4, n_experts=4, lora_rank=2)
    m = ToyModel(cfg)
    _, records = m.forward(np.zeros((3, 4), dtype=int))
    s = ActivationStats.for_model(m)
    s.record_all(records)
    assert s.observations.tolist() == [[12] * 4] * 2
    # fresh gates are near uniform and tau starts at tau_max / 2 < 1/N
    assert s.overall_average() == 4.0


def test_preferred_expert_entropy():
    w = np.array([[1, 0, 0, 0], [0.9, 0.1, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 0]], float)
    groups = np.array([0, 0, 1, 1, 1])
    ent = preferred_expert_entropy(w, groups, 3)
    assert ent[0] == 0.0
    # two experts, evenly used: log 2 / log 4
    assert ent[1] == pytest.approx(0.5)
    assert np.isnan(ent[2])
    uniform = preferred_expert_entropy(np.eye(4), np.zeros(4, int), 1)
    assert uniform[0] == pytest.approx(1.0)
