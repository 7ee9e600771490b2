import os
import struct

import numpy as np
import pytest

from uatformer.construct import PER_REGION, Box, build_lookup_transformer, partition_domain, \
    sample_representatives, select_sharpness, estimate_sup_error
from uatformer.serialize import (
    MAGIC, BadMagicError, CsvError, TruncatedFileError, VersionMismatchError, csv_text, emit_csv, load_model,
    model_from_bytes, model_to_bytes, read_csv, save_model,
)
from uatformer.transformer import init_block_params, transformer_block


def assert_same_block(a, b):
    assert a.use_residual == b.use_residual and a.use_layernorm == b.use_layernorm
    assert a.scale_dim == b.scale_dim and a.ln_eps == b.ln_eps
    ea, eb = a.named_arrays(), b.named_arrays()
    assert list(ea) == list(eb)
    for k in ea:
        assert ea[k].shape == eb[k].shape and ea[k].tobytes() == eb[k].tobytes(), k


@pytest.mark.parametrize("layernorm", [False, True])
def test_block_round_trip_is_bitwise(tmp_path, rng, layernorm):
    p = init_block_params(6, 3, 10, rng, d_k=4, d_v=5, use_layernorm=layernorm, random_biases=True)
    path = tmp_path / "block.uatt"
    save_model(p, path, n=7)
    q = load_model(path)
    assert_same_block(p, q)
    x = rng.normal(size=(7, 6))
    assert transformer_block(x, p).tobytes() == transformer_block(x, q).tobytes()
    assert model_to_bytes(q, 7) == path.read_bytes()


@pytest.mark.parametrize("mode", ["single-head-memory", PER_REGION])
def test_certified_model_round_trip(tmp_path, rng, mode):
    box = Box([0, 0], [1, 2])
    part = partition_domain(box, (3, 2))
    f = lambda x: np.array([[x[0], x[1]], [x[0] * x[1], 1.0]])
    reps = sample_representatives(part, f)
    model = build_lookup_transformer(part, reps, select_sharpness(part, 1e-4), mode, 1e-4)
    estimate_sup_error(model, part, f)
    path = tmp_path / "lookup.uatt"
    save_model(model, path)
    back = load_model(path)
    assert_same_block(model.block, back.block)
    assert back.mode == mode and back.resolution == (3, 2)
    assert back.spec.out_shape == (2, 2) and back.spec.in_shape == (2,)
    assert back.measured_sup_error == model.measured_sup_error
    assert back.analytic_bound == model.analytic_bound
    u = rng.uniform([0, 0], [1, 2], size=(10, 2))
    assert back.evaluate_flat(u).tobytes() == model.evaluate_flat(u).tobytes()
    assert back(u[0]).shape == (2, 2)


def test_bad_magic(rng):
    data = model_to_bytes(init_block_params(4, 2, 4, rng))
    with pytest.raises(BadMagicError):
        model_from_bytes(b"XXXXX" + data[5:])
    with pytest.raises(BadMagicError):
        model_from_bytes(b"")


def test_version_mismatch(rng):
    data = model_to_bytes(init_block_params(4, 2, 4, rng))
    bumped = MAGIC + struct.pack("<I", 2) + data[len(MAGIC) + 4:]
    with pytest.raises(VersionMismatchError):
        model_from_bytes(bumped)


def test_truncated_reports_sizes(rng):
    data = model_to_bytes(init_block_params(4, 2, 4, rng))
    with pytest.raises(TruncatedFileError) as info:
        model_from_bytes(data[:-8])
    assert info.value.expected == len(data) and info.value.actual == len(data) - 8
    with pytest.raises(TruncatedFileError):
        model_from_bytes(data + b"\0")


def test_csv_round_trip(tmp_path):
    path = tmp_path / "t.csv"
    emit_csv([["a", "b", "ok"], [0.1, 3, True], [1e-300, -2.5, False]], path)
    rows = read_csv(path)
    assert rows[0] == ["a", "b", "ok"]
    assert float(rows[1][0]) == 0.1 and rows[1][2] == "true"
    assert float(rows[2][0]) == 1e-300
    assert path.read_bytes().count(b"\r\n") == 3


def test_csv_ragged():
    with pytest.raises(CsvError):
        csv_text([["a", "b"], [1]])


def test_csv_is_deterministic(tmp_path, rng):
    table = [["x", "y"]] + rng.normal(size=(20, 2)).tolist()
    emit_csv(table, tmp_path / "a.csv")
    emit_csv(table, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_atomic_write_leaves_no_temp_files(tmp_path, rng):
    save_model(init_block_params(4, 2, 4, rng), tmp_path / "m.uatt")
    assert os.listdir(tmp_path) == ["m.uatt"]
