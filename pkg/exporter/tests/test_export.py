"""Map handling, shape checking, packing, and the CLI surface."""

import json
import subprocess
import sys

import numpy as np
import pytest
import torch
import yaml

from xbnn_export import (
    CheckpointError,
    InvalidCheckpoint,
    KernelTooLarge,
    MapError,
    ShapeMismatch,
    UnsupportedLayer,
    binarize_sign,
    export,
    load_checkpoint,
    load_map,
    model_document,
    pack_weight_bits,
    resolve_layers,
)
from xbnn_export.cli import main as cli_main

from ckutil import map_yaml_dict, random_net


def save_net(tmp_path, state, mapcfg, map_edit=None, state_edit=None):
    """Write checkpoint and map files, optionally mutated first."""
    state = dict(state)
    if state_edit:
        state_edit(state)
    sd = {k: torch.from_numpy(np.asarray(v)) for k, v in state.items()}
    ck = tmp_path / "ck.pt"
    torch.save(sd, ck)
    doc = map_yaml_dict(mapcfg)
    if map_edit:
        map_edit(doc)
    mp = tmp_path / "map.yaml"
    mp.write_text(yaml.safe_dump(doc))
    return ck, mp


def export_err(tmp_path, state, mapcfg, **kwargs):
    ck, mp = save_net(tmp_path, state, mapcfg, **kwargs)
    return lambda: export(ck, mp, tmp_path / "out.json")


def test_trivial_normalization_exports_ge_zero(tmp_path):
    # identity batch norm must fold to a plain sign of the conv sum
    state = {
        "features.0.weight": np.ones((3, 4, 1, 1), np.float32),
        "features.1.weight": np.ones(3, np.float32),
        "features.1.bias": np.zeros(3, np.float32),
        "features.1.running_mean": np.zeros(3, np.float32),
        "features.1.running_var": np.ones(3, np.float32),
    }
    mapcfg = {
        "name": "triv",
        "input_shape": (4, 4, 4),
        "layers": [{"conv": "features.0", "bn": "features.1", "eps": 0.0,
                    "stride": (1, 1), "padding": (0, 0), "pad_value": -1,
                    "pool": None}],
    }
    ck, mp = save_net(tmp_path, state, mapcfg)
    doc = export(ck, mp, tmp_path / "out.json")
    assert doc["layers"][0]["thresholds"] == [
        {"mode": "GE", "t": 0, "const_bit": 0}] * 3


def test_binarize_ties_round_to_plus_one():
    w = np.array([[-0.5, 0.0], [0.25, -0.0]])
    assert binarize_sign(w).tolist() == [[0, 1], [1, 1]]


def test_pack_single_tile_bit_positions():
    bits = np.zeros((1, 3, 1, 1), np.uint8)
    bits[0, 0] = 1
    bits[0, 2] = 1
    words = pack_weight_bits(bits)
    assert words.shape == (1, 1, 1, 1)
    assert words[0, 0, 0, 0] == 0b101


def test_pack_second_tile_and_padding_lanes():
    bits = np.zeros((1, 17, 1, 1), np.uint8)
    bits[0, 16] = 1
    words = pack_weight_bits(bits)
    assert words.shape == (1, 1, 1, 2)
    assert words[0, 0, 0, 0] == 0
    assert words[0, 0, 0, 1] == 1
    # lanes past c_in never carry stray bits
    full = pack_weight_bits(np.ones((2, 20, 3, 3), np.uint8))
    assert np.all(full[..., 1] == 0x000F)


def test_export_is_byte_deterministic(tmp_path):
    state, mapcfg, _ = random_net(3)
    ck, mp = save_net(tmp_path, state, mapcfg)
    export(ck, mp, tmp_path / "a.json")
    export(ck, mp, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_exported_file_is_valid_json_with_expected_keys(tmp_path):
    state, mapcfg, _ = random_net(4)
    ck, mp = save_net(tmp_path, state, mapcfg)
    export(ck, mp, tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["format_tag"] == "XBM1"
    assert sorted(doc) == ["format_tag", "input_shape", "layers", "name"]
    layer = doc["layers"][0]
    assert sorted(layer) == [
        "c_in", "c_out", "k_h", "k_w", "pad_value", "pad_x", "pad_y",
        "pool", "stride_x", "stride_y", "thresholds", "weights",
    ]


def test_checkpoint_wrapped_in_state_dict_key(tmp_path):
    state, mapcfg, _ = random_net(5)
    sd = {k: torch.from_numpy(v) for k, v in state.items()}
    ck = tmp_path / "wrapped.pt"
    torch.save({"state_dict": sd}, ck)
    loaded = load_checkpoint(ck)
    assert set(loaded) == set(state)


def test_oversized_kernel_rejected(tmp_path):
    state, mapcfg, _ = random_net(6)
    conv = mapcfg["layers"][0]["conv"]

    def widen(s):
        c_out, c_in = s[f"{conv}.weight"].shape[:2]
        s[f"{conv}.weight"] = np.ones((c_out, c_in, 11, 11), np.float32)

    def unpad(doc):
        doc["layers"][0]["padding"] = [0, 0]

    with pytest.raises(KernelTooLarge) as err:
        export_err(tmp_path, state, mapcfg, state_edit=widen, map_edit=unpad)()
    assert "11x11" in str(err.value)
    assert "smaller convolutions" in str(err.value)


def test_unsupported_layer_type(tmp_path):
    state, mapcfg, _ = random_net(7)
    with pytest.raises(UnsupportedLayer) as err:
        export_err(tmp_path, state, mapcfg,
                   map_edit=lambda d: d["layers"][0].update(type="depthwise"))()
    assert "depthwise" in str(err.value)


def test_unsupported_average_pool(tmp_path):
    state, mapcfg, _ = random_net(8)
    with pytest.raises(UnsupportedLayer):
        export_err(tmp_path, state, mapcfg,
                   map_edit=lambda d: d["layers"][0].update(
                       pool={"kind": "avg", "size": 2}))()


def test_nonzero_conv_bias_rejected_zero_bias_tolerated(tmp_path):
    state, mapcfg, _ = random_net(9)
    conv = mapcfg["layers"][0]["conv"]
    c_out = state[f"{conv}.weight"].shape[0]

    def with_bias(s):
        s[f"{conv}.bias"] = np.full(c_out, 0.5, np.float32)

    with pytest.raises(UnsupportedLayer):
        export_err(tmp_path, state, mapcfg, state_edit=with_bias)()

    def with_zero_bias(s):
        s[f"{conv}.bias"] = np.zeros(c_out, np.float32)

    ck, mp = save_net(tmp_path, state, mapcfg, state_edit=with_zero_bias)
    export(ck, mp, tmp_path / "ok.json")


def test_missing_tensor_reported(tmp_path):
    state, mapcfg, _ = random_net(10)
    with pytest.raises(ShapeMismatch) as err:
        export_err(tmp_path, state, mapcfg,
                   map_edit=lambda d: d["layers"][0].update(conv="nowhere"))()
    assert "nowhere.weight" in str(err.value)


def test_bn_length_mismatch(tmp_path):
    state, mapcfg, _ = random_net(11)
    bn = mapcfg["layers"][0]["bn"]

    def shrink(s):
        s[f"{bn}.bias"] = s[f"{bn}.bias"][:-1] if s[f"{bn}.bias"].shape[0] > 1 \
            else np.zeros(2, np.float32)

    with pytest.raises(ShapeMismatch):
        export_err(tmp_path, state, mapcfg, state_edit=shrink)()


def test_channel_chain_break(tmp_path):
    state, mapcfg, _ = random_net(12)

    def bump(doc):
        doc["input_shape"][2] += 1

    with pytest.raises(ShapeMismatch) as err:
        export_err(tmp_path, state, mapcfg, map_edit=bump)()
    assert "input channels" in str(err.value)


def test_negative_variance_rejected(tmp_path):
    state, mapcfg, _ = random_net(13)
    bn = mapcfg["layers"][0]["bn"]

    def poison(s):
        v = np.array(s[f"{bn}.running_var"])
        v[0] = -5.0
        s[f"{bn}.running_var"] = v

    with pytest.raises(InvalidCheckpoint):
        export_err(tmp_path, state, mapcfg, state_edit=poison)()


def test_huge_threshold_rejected(tmp_path):
    state, mapcfg, _ = random_net(14)
    bn = mapcfg["layers"][0]["bn"]

    def poison(s):
        g = np.array(s[f"{bn}.weight"])
        b = np.array(s[f"{bn}.bias"])
        g[0] = 1e-4
        b[0] = 1e4
        s[f"{bn}.weight"] = g
        s[f"{bn}.bias"] = b

    with pytest.raises(InvalidCheckpoint) as err:
        export_err(tmp_path, state, mapcfg, state_edit=poison)()
    assert "16-bit" in str(err.value)


def test_map_schema_errors(tmp_path):
    state, mapcfg, _ = random_net(15)
    cases = [
        lambda d: d["layers"][0].update(activation="relu"),
        lambda d: d["layers"][0].update(pad_value=0),
        lambda d: d["layers"][0].update(stride=0),
        lambda d: d["layers"][0].update(stride=[1, 1, 1]),
        lambda d: d.pop("input_shape"),
        lambda d: d.update(layers=[]),
    ]
    for edit in cases:
        with pytest.raises(MapError):
            export_err(tmp_path, state, mapcfg, map_edit=edit)()


def test_padding_must_stay_below_kernel(tmp_path):
    state, mapcfg, _ = random_net(16)
    conv = mapcfg["layers"][0]["conv"]
    k = state[f"{conv}.weight"].shape[2]
    with pytest.raises(MapError) as err:
        export_err(tmp_path, state, mapcfg,
                   map_edit=lambda d: d["layers"][0].update(padding=[k, k]))()
    assert "below the kernel" in str(err.value)


def test_unreadable_map_and_checkpoint(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("layers: [unclosed")
    with pytest.raises(MapError):
        load_map(bad)
    with pytest.raises(MapError):
        load_map(tmp_path / "missing.yaml")
    garbage = tmp_path / "garbage.pt"
    garbage.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(garbage)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")


def test_cli_success_and_failure_codes(tmp_path, capsys):
    state, mapcfg, _ = random_net(17)
    ck, mp = save_net(tmp_path, state, mapcfg)
    out = tmp_path / "m.json"
    assert cli_main(["--checkpoint", str(ck), "--map", str(mp),
                     "--out", str(out)]) == 0
    assert "wrote" in capsys.readouterr().out
    assert out.exists()

    assert cli_main(["--checkpoint", str(tmp_path / "no.pt"), "--map", str(mp),
                     "--out", str(out)]) == 1

    conv = mapcfg["layers"][0]["conv"]

    def widen(s):
        c_out, c_in = s[f"{conv}.weight"].shape[:2]
        s[f"{conv}.weight"] = np.ones((c_out, c_in, 11, 11), np.float32)

    ck2, mp2 = save_net(tmp_path, state, mapcfg, state_edit=widen,
                        map_edit=lambda d: d["layers"][0].update(padding=[0, 0]))
    assert cli_main(["--checkpoint", str(ck2), "--map", str(mp2),
                     "--out", str(out)]) == 2

    with pytest.raises(SystemExit) as err:
        cli_main(["--checkpoint", str(ck)])
    assert err.value.code == 1


def test_console_script_runs(tmp_path):
    state, mapcfg, _ = random_net(18)
    ck, mp = save_net(tmp_path, state, mapcfg)
    out = tmp_path / "m.json"
    r = subprocess.run(
        [sys.executable, "-m", "xbnn_export.cli", "--checkpoint", str(ck),
         "--map", str(mp), "--out", str(out)],
        capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert out.exists()
