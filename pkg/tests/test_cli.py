"""End-to-end command-line checks on miniature configurations."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from caltok.cli import main
from caltok.datagen import default_pinhole
from caltok.geometry import FisheyeCalibration
from caltok.images import ImageBuffer, read_pgm, read_ppm, write_ppm

MODEL32 = {
    "image_size": 32, "patch_size": 8, "layers": 2, "embed_dim": 32, "heads": 4,
}


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload))


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def synth_spec() -> dict:
    return {
        "seed": 3,
        "pin": default_pinhole(32, 7.0).to_json_dict(),
        "sphere_count": [2, 4],
        "plane_count": [1, 1],
        "n_train": 6,
        "n_val": 2,
        "n_test": 3,
    }


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory, synth_spec) -> Path:
    root = tmp_path_factory.mktemp("clids")
    spec_path = root / "spec.json"
    write_json(spec_path, synth_spec)
    assert main(["synth", "--spec", str(spec_path), "--out", str(root / "data")]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def model_path(tmp_path_factory, dataset_dir) -> Path:
    root = tmp_path_factory.mktemp("climodel")
    cfg = root / "pretrain.json"
    write_json(cfg, {"seed": 0, "iterations": 20, "lr": 1e-3, "model": MODEL32})
    out = root / "model.ctok"
    code = main([
        "pretrain", "--data", str(dataset_dir), "--config", str(cfg),
        "--out", str(out),
    ])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def tokens_path(tmp_path_factory, dataset_dir, model_path) -> Path:
    root = tmp_path_factory.mktemp("clitokens")
    cfg = root / "adapt.json"
    write_json(cfg, {"seed": 1, "iterations": 4, "batch": 2, "model": MODEL32})
    out = root / "tokens.ctok"
    code = main([
        "adapt", "--model", str(model_path), "--data", str(dataset_dir),
        "--config", str(cfg), "--out", str(out),
    ])
    assert code == 0
    return out


class TestSynth:
    def test_manifest_exists(self, dataset_dir):
        assert (dataset_dir / "manifest.json").exists()

    def test_missing_spec_exits_2(self, tmp_path):
        code = main(["synth", "--spec", str(tmp_path / "nope.json"), "--out", str(tmp_path / "d")])
        assert code == 2

    def test_rerun_identical(self, tmp_path, synth_spec):
        spec_path = tmp_path / "spec.json"
        write_json(spec_path, synth_spec)
        assert main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "a")]) == 0
        assert main(["synth", "--spec", str(spec_path), "--out", str(tmp_path / "b")]) == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


@pytest.fixture()
def warp_inputs(tmp_path, dataset_dir) -> dict:
    pin = default_pinhole(32, 7.0)
    fe = {
        "k": [1.0, -0.05, -0.005, -0.0005], "cx": 15.5, "cy": 15.5,
        "scale": 16.0 / 1.3, "theta_max": 1.3, "width": 32, "height": 32,
    }
    pin_path = tmp_path / "pin.json"
    fe_path = tmp_path / "fe.json"
    write_json(pin_path, pin.to_json_dict())
    write_json(fe_path, fe)
    image = dataset_dir / "scenes/train/000000.ppm"
    return {"pin": pin_path, "fe": fe_path, "image": image, "tmp": tmp_path}


class TestWarpCommands:
    def test_distort_outputs(self, warp_inputs, capsys):
        out = warp_inputs["tmp"] / "fish.ppm"
        code = main([
            "distort", "--image", str(warp_inputs["image"]), "--pin",
            str(warp_inputs["pin"]), "--fe", str(warp_inputs["fe"]),
            "--out", str(out),
            "--depth", str(warp_inputs["image"]).replace(".ppm", ".pfm"),
        ])
        captured = capsys.readouterr()
        assert code == 0
        assert out.exists()
        assert (warp_inputs["tmp"] / "fish.mask.pgm").exists()
        assert (warp_inputs["tmp"] / "fish_depth.pfm").exists()
        line = [l for l in captured.out.splitlines() if l.startswith("coverage_loss=")]
        assert len(line) == 1
        assert 0.0 <= float(line[0].split("=")[1]) <= 1.0

    def test_near_pinhole_coverage_close_to_zero(self, tmp_path, capsys):
        pin = {"fx": 1000.0, "fy": 1000.0, "cx": 15.5, "cy": 15.5, "width": 32, "height": 32}
        # scale slightly above the focal length keeps every preimage inside
        # the perspective frame despite tan(theta) > theta
        fe = {
            "k": [1.0, 0.0, 0.0, 0.0], "cx": 15.5, "cy": 15.5,
            "scale": 1010.0, "theta_max": 0.5, "width": 32, "height": 32,
        }
        write_json(tmp_path / "pin.json", pin)
        write_json(tmp_path / "fe.json", fe)
        rng = np.random.default_rng(0)
        img = ImageBuffer(rng.uniform(0, 1, (32, 32, 3)).astype(np.float32))
        write_ppm(img, tmp_path / "in.ppm")
        code = main([
            "distort", "--image", str(tmp_path / "in.ppm"), "--pin",
            str(tmp_path / "pin.json"), "--fe", str(tmp_path / "fe.json"),
            "--out", str(tmp_path / "out.ppm"),
        ])
        assert code == 0
        cov = float(
            [l for l in capsys.readouterr().out.splitlines() if "coverage" in l][0]
            .split("=")[1]
        )
        assert cov < 0.01

    def test_non_monotone_exits_4(self, warp_inputs):
        bad = {
            "k": [1.0, -1.0, 0.0, 0.0], "cx": 15.5, "cy": 15.5,
            "scale": 10.0, "theta_max": 1.5, "width": 32, "height": 32,
        }
        bad_path = warp_inputs["tmp"] / "bad.json"
        write_json(bad_path, bad)
        code = main([
            "distort", "--image", str(warp_inputs["image"]), "--pin",
            str(warp_inputs["pin"]), "--fe", str(bad_path),
            "--out", str(warp_inputs["tmp"] / "x.ppm"),
        ])
        assert code == 4

    def test_round_trip_bounded_error(self, warp_inputs, capsys):
        fish = warp_inputs["tmp"] / "fish.ppm"
        back = warp_inputs["tmp"] / "back.ppm"
        assert main([
            "distort", "--image", str(warp_inputs["image"]), "--pin",
            str(warp_inputs["pin"]), "--fe", str(warp_inputs["fe"]),
            "--out", str(fish),
        ]) == 0
        assert main([
            "undistort", "--image", str(fish), "--fe", str(warp_inputs["fe"]),
            "--pin", str(warp_inputs["pin"]), "--out", str(back),
        ]) == 0
        capsys.readouterr()
        original = read_ppm(warp_inputs["image"]).data
        restored = read_ppm(back).data
        fish_mask = read_pgm(warp_inputs["tmp"] / "fish.mask.pgm") == 255
        back_mask = read_pgm(warp_inputs["tmp"] / "back.mask.pgm") == 255
        # score only where the round trip had valid content throughout
        ys, xs = np.mgrid[0:32, 0:32]
        interior = back_mask & fish_mask[ys, xs]
        err = np.abs(original - restored).max(axis=2)
        # 32x32 resampling twice: allow generous but bounded error
        assert err[interior].mean() < 0.1

    def test_parse_error_exits_2(self, warp_inputs):
        garbled = warp_inputs["tmp"] / "garbled.json"
        garbled.write_text("{not json")
        code = main([
            "distort", "--image", str(warp_inputs["image"]), "--pin",
            str(garbled), "--fe", str(warp_inputs["fe"]),
            "--out", str(warp_inputs["tmp"] / "y.ppm"),
        ])
        assert code == 2


class TestPretrain:
    def test_outputs(self, model_path):
        assert model_path.exists()
        assert Path(str(model_path) + ".log.csv").exists()
        assert Path(str(model_path) + ".val.json").exists()

    def test_deterministic_checkpoint(self, tmp_path, dataset_dir):
        cfg = tmp_path / "cfg.json"
        write_json(cfg, {"seed": 2, "iterations": 4, "lr": 1e-3, "model": MODEL32})
        a = tmp_path / "a.ctok"
        b = tmp_path / "b.ctok"
        assert main(["pretrain", "--data", str(dataset_dir), "--config", str(cfg), "--out", str(a)]) == 0
        assert main(["pretrain", "--data", str(dataset_dir), "--config", str(cfg), "--out", str(b)]) == 0
        assert digest(a) == digest(b)

    def test_bad_config_exits_2(self, tmp_path, dataset_dir):
        cfg = tmp_path / "cfg.json"
        write_json(cfg, {"loss": "squared-hinge"})
        code = main([
            "pretrain", "--data", str(dataset_dir), "--config", str(cfg),
            "--out", str(tmp_path / "m.ctok"),
        ])
        assert code == 2

    def test_loss_log_schema(self, model_path):
        rows = Path(str(model_path) + ".log.csv").read_text().strip().split("\n")
        assert rows[0] == "step,loss,rmse_eval"
        assert len(rows) == 1 + 20


class TestAdapt:
    def test_backbone_checksum_unchanged(self, model_path, tokens_path):
        before = digest(model_path)
        # fixture already ran adapt; hash must be stable afterwards
        assert digest(model_path) == before
        assert tokens_path.exists()

    def test_loss_csv_rows_match_iterations(self, tokens_path):
        rows = Path(str(tokens_path) + ".log.csv").read_text().strip().split("\n")
        assert len(rows) == 1 + 4

    def test_config_error_exits_2(self, tmp_path, dataset_dir, model_path):
        cfg = tmp_path / "cfg.json"
        write_json(cfg, {"token_mode": "mystery"})
        code = main([
            "adapt", "--model", str(model_path), "--data", str(dataset_dir),
            "--config", str(cfg), "--out", str(tmp_path / "t.ctok"),
        ])
        assert code == 2


class TestEval:
    def test_perspective_report(self, tmp_path, dataset_dir, model_path, capsys):
        out = tmp_path / "report.json"
        code = main([
            "eval", "--model", str(model_path), "--data", str(dataset_dir),
            "--mode", "perspective", "--out", str(out),
        ])
        assert code == 0
        report = json.loads(out.read_text())
        assert set(report) == {"rmse", "delta1", "n_pixels", "per_image"}
        assert out.with_suffix(".csv").exists()
        stdout = capsys.readouterr().out
        assert any(l.startswith("rmse=") for l in stdout.splitlines())

    def test_fisheye_uses_tokens_and_writes_errmaps(
        self, tmp_path, dataset_dir, model_path, tokens_path
    ):
        out = tmp_path / "fish.json"
        code = main([
            "eval", "--model", str(model_path), "--tokens", str(tokens_path),
            "--data", str(dataset_dir), "--mode", "fisheye", "--seed", "5",
            "--out", str(out),
        ])
        assert code == 0
        report = json.loads(out.read_text())
        for rec in report["per_image"]:
            assert (tmp_path / f"errmap_{rec['index']:06d}.pgm").exists()

    def test_perspective_ignores_tokens(self, tmp_path, dataset_dir, model_path, tokens_path):
        a = tmp_path / "with.json"
        b = tmp_path / "without.json"
        for out, extra in ((a, ["--tokens", str(tokens_path)]), (b, [])):
            assert main([
                "eval", "--model", str(model_path), "--data", str(dataset_dir),
                "--mode", "perspective", "--out", str(out), *extra,
            ]) == 0
        assert json.loads(a.read_text()) == json.loads(b.read_text())


class TestExportAttn:
    def test_one_map_per_layer_with_sidecars(self, tmp_path, dataset_dir, model_path, tokens_path):
        out = tmp_path / "attn"
        image = dataset_dir / "scenes/test/000008.ppm"
        code = main([
            "export-attn", "--model", str(model_path), "--tokens", str(tokens_path),
            "--image", str(image), "--out", str(out),
        ])
        assert code == 0
        for l in range(MODEL32["layers"]):
            assert (out / f"attn_layer_{l}.pgm").exists()
            sidecar = json.loads((out / f"attn_layer_{l}.json").read_text())
            assert set(sidecar) == {"min", "max"}
            assert sidecar["min"] <= sidecar["max"]

    def test_single_mode_maps_differ_from_layerwise(
        self, tmp_path, dataset_dir, model_path, tokens_path
    ):
        from caltok.checkpoint import load_tokens, save_tokens
        from caltok.model import TokenSet

        tokens = load_tokens(tokens_path)
        single = tmp_path / "single.ctok"
        save_tokens(TokenSet(tokens.tokens, "single"), single)
        image = dataset_dir / "scenes/test/000008.ppm"
        out_a = tmp_path / "attn_layerwise"
        out_b = tmp_path / "attn_single"
        for out, tok in ((out_a, tokens_path), (out_b, single)):
            assert main([
                "export-attn", "--model", str(model_path), "--tokens", str(tok),
                "--image", str(image), "--out", str(out),
            ]) == 0
        checksums_a = [digest(out_a / f"attn_layer_{l}.pgm") for l in range(2)]
        checksums_b = [digest(out_b / f"attn_layer_{l}.pgm") for l in range(2)]
        assert checksums_a != checksums_b
