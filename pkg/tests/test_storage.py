"""Unit tests for the JSON, JSON Lines and checkpoint helpers in storage.

Bare file names resolve under the configured data dir, which the autouse
``isolated_config`` fixture points at the test's tmp_path.
"""

# pylint: disable=import-error

import json

import numpy as np
import pytest

import storage

# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


@pytest.mark.asyncio
async def test_bare_names_resolve_under_data_dir(tmp_path):
    """A bare file name lands in the configured data dir."""

    assert await storage.save_json("thing.json", {"a": 1})
    assert (tmp_path / "thing.json").exists()
    assert await storage.load_json("thing.json") == {"a": 1}


@pytest.mark.asyncio
async def test_missing_file_returns_default(tmp_path):
    assert await storage.load_json(tmp_path / "nope.json", default={"x": 0}) == {"x": 0}


@pytest.mark.asyncio
async def test_corrupt_json_is_backed_up(tmp_path):
    """Undecodable files return the default and keep a .bak copy."""

    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    assert await storage.load_json(path, default=[]) == []
    assert (tmp_path / "broken.json.bak").read_text(encoding="utf-8") == "{not json"


@pytest.mark.asyncio
async def test_non_finite_values_refused(tmp_path):
    """NaN cannot be written; callers encode infinity as null themselves."""

    path = tmp_path / "nan.json"
    assert not await storage.save_json(path, {"x": float("nan")})
    assert not path.exists()


@pytest.mark.asyncio
async def test_atomic_write_leaves_no_temp_file(tmp_path):
    path = tmp_path / "sub" / "out.json"
    assert await storage.save_json(path, [1, 2, 3])
    assert json.loads(path.read_text(encoding="utf-8")) == [1, 2, 3]
    assert not (tmp_path / "sub" / "out.json.tmp").exists()


@pytest.mark.asyncio
async def test_failed_save_raises_when_checked(tmp_path):
    path = tmp_path / "nan.json"
    with pytest.raises(storage.StorageError, match="nan.json"):
        storage.ensure_written(await storage.save_json(path, {"x": float("nan")}), path)
    storage.ensure_written(await storage.save_json(path, {"x": 1.0}), path)


# ---------------------------------------------------------------------------
# JSON Lines
# ---------------------------------------------------------------------------


@pytest.mark.asyncio
async def test_jsonl_round_trip(tmp_path):
    rows = [{"t": 0, "exit": 1}, {"t": 1, "exit": 3}]
    path = tmp_path / "log.jsonl"
    assert await storage.write_jsonl(path, rows)
    assert path.read_text(encoding="utf-8").count("\n") == 2
    assert await storage.read_jsonl(path) == rows


@pytest.mark.asyncio
async def test_jsonl_skips_malformed_lines(tmp_path):
    path = tmp_path / "mixed.jsonl"
    path.write_text('{"a": 1}\nnot-json\n\n{"a": 2}\n', encoding="utf-8")
    assert await storage.read_jsonl(path) == [{"a": 1}, {"a": 2}]


@pytest.mark.asyncio
async def test_jsonl_missing_file_is_empty(tmp_path):
    assert await storage.read_jsonl(tmp_path / "none.jsonl") == []


def test_file_sha256_tracks_content(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    a.write_text("same", encoding="utf-8")
    b.write_text("same", encoding="utf-8")
    assert storage.file_sha256(a) == storage.file_sha256(b)
    b.write_text("different", encoding="utf-8")
    assert storage.file_sha256(a) != storage.file_sha256(b)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@pytest.mark.asyncio
async def test_checkpoint_round_trip_is_exact(tmp_path):
    """64-bit parameters survive the JSON encoding bit for bit."""

    rng = np.random.default_rng(0)
    params = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}
    optimizer = {"m/w": rng.normal(size=(3, 4))}
    path = tmp_path / "ckpt.json"
    assert await storage.save_checkpoint(path, {"n_exits": 2}, params, 7, extra={"epoch": 1}, optimizer=optimizer)

    payload = await storage.load_checkpoint(path)
    assert payload["net_config"] == {"n_exits": 2}
    assert payload["rng_seed"] == 7
    assert payload["extra"] == {"epoch": 1}
    for name, arr in params.items():
        assert payload["params"][name].shape == arr.shape
        assert np.array_equal(payload["params"][name], arr)
    assert np.array_equal(payload["optimizer"]["m/w"], optimizer["m/w"])


@pytest.mark.asyncio
async def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "old.json"
    path.write_text(json.dumps({"format_version": 99, "params": {}}), encoding="utf-8")
    assert await storage.load_checkpoint(path) is None


@pytest.mark.asyncio
async def test_missing_checkpoint(tmp_path):
    assert await storage.load_checkpoint(tmp_path / "absent.json") is None


@pytest.mark.asyncio
async def test_resolved_config_snapshot(tmp_path):
    assert await storage.save_resolved_config(tmp_path, {"seed": 3, "peak_gflops": None})
    data = json.loads((tmp_path / "resolved_config.json").read_text(encoding="utf-8"))
    assert data == {"seed": 3, "peak_gflops": None}
