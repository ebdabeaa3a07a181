import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from minktrack.dataio import (FormatError, config_from_mapping, config_to_mapping, read_config,
                              read_jsonl, write_config, write_jsonl)
from minktrack.nn import ConfigurationError
from minktrack.sim import SceneConfig
from minktrack.train import TrainConfig

finite = st.floats(allow_nan=False, allow_infinity=False)


@given(st.lists(finite, max_size=20))
def test_float_round_trip_jsonl(tmp_path_factory, xs):
    path = tmp_path_factory.mktemp("j") / "x.jsonl"
    write_jsonl(path, "test/1", ({"x": x} for x in xs))
    _, recs = read_jsonl(path, "test/1")
    back = [r["x"] for r in recs]
    assert [math.copysign(1, a) for a in back] == [math.copysign(1, a) for a in xs]
    assert back == xs


def test_header_and_meta(tmp_path):
    p = tmp_path / "a.jsonl"
    assert write_jsonl(p, "s/1", [{"a": 1}, {"a": 2}], meta={"k": 0.1}) == 2
    header, recs = read_jsonl(p)
    assert header == {"schema": "s/1", "meta": {"k": 0.1}}
    assert [r["a"] for r in recs] == [1, 2]


def test_schema_mismatch(tmp_path):
    p = tmp_path / "a.jsonl"
    write_jsonl(p, "s/1", [])
    with pytest.raises(FormatError):
        read_jsonl(p, "other/1")


def test_missing_header(tmp_path):
    p = tmp_path / "a.jsonl"
    p.write_text('{"a": 1}\n', encoding="utf-8")
    with pytest.raises(FormatError):
        read_jsonl(p)
    p.write_text("not json\n", encoding="utf-8")
    with pytest.raises(FormatError):
        read_jsonl(p)


def test_malformed_record(tmp_path):
    p = tmp_path / "a.jsonl"
    p.write_text('{"schema": "s/1"}\n{"a": \n', encoding="utf-8")
    _, recs = read_jsonl(p)
    with pytest.raises(FormatError, match=":2:"):
        list(recs)


def test_non_finite_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_jsonl(tmp_path / "a.jsonl", "s/1", [{"x": float("nan")}])


def test_config_round_trip(tmp_path):
    cfg = TrainConfig(steps=7, lr=0.1 + 0.2, schedule="one_cycle", stage_channels=(4, 8))
    p = tmp_path / "c.cfg"
    write_config(p, config_to_mapping(cfg))
    back = config_from_mapping(TrainConfig, read_config(p))
    assert back == cfg
    assert back.lr == 0.1 + 0.2


def test_config_comments_and_blank_lines(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# scene\n\nn_scenes = 2  # two\nseed=5\ndropout = 0.25\n", encoding="utf-8")
    cfg = config_from_mapping(SceneConfig, read_config(p))
    assert (cfg.n_scenes, cfg.seed, cfg.dropout) == (2, 5, 0.25)


def test_config_errors(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("no equals sign\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        read_config(p)
    with pytest.raises(ConfigurationError, match="unknown"):
        config_from_mapping(SceneConfig, {"bogus": "1"})
    with pytest.raises(ConfigurationError, match="bad value"):
        config_from_mapping(SceneConfig, {"n_scenes": "two"})
    with pytest.raises(ConfigurationError):
        config_from_mapping(SceneConfig, {"dropout": "1.5"})


@given(st.lists(finite, min_size=1, max_size=4))
def test_tuple_float_config(tmp_path_factory, xs):
    from minktrack.dataio import _convert, format_value
    back = _convert(format_value(tuple(xs)), tuple[float, ...])
    assert np.array_equal(np.array(back), np.array(xs))
