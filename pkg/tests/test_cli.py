import json

import numpy as np
import pytest

from weightsteg.cli import main
from weightsteg.dataset import load_dataset, synth_collection
from weightsteg.detect import load_detector
from weightsteg.imagerep import grayscale_fourpart, read_pgm, resize
from weightsteg.pipeline import ExperimentConfig, run_detection_run, select_train_pairs, load_flat_models
from weightsteg.steg import Payload, extract_lsb
from weightsteg.weights_io import flatten, load_model


@pytest.fixture
def mc_dir(tmp_path):
    synth_collection(tmp_path / "mc", n_zoos=2, n_models=3, n_params=200, seed=4)
    return tmp_path / "mc"


def run(*argv):
    return main([str(a) for a in argv])


class TestEmbedExtract:
    def test_roundtrip_via_files(self, tmp_path, mc_dir):
        model = mc_dir / "zoo0" / "model000.safetensors"
        out = tmp_path / "att.safetensors"
        assert run("embed", "--in", model, "--lsb", 8, "--fill",
                   "--synthetic-payload", "32,5", "--out", out) == 0
        flat = flatten(load_model(out))
        recovered = extract_lsb(flat, 8, 32 * 8)
        assert Payload.synthetic(32, 5).bits.tolist() == recovered.bits[: 32 * 8].tolist()

        back = tmp_path / "p.bin"
        assert run("extract", "--in", out, "--lsb", 8, "--bits", 32 * 8, "--out", back) == 0
        assert back.read_bytes() == Payload.synthetic(32, 5).to_bytes()

    def test_non_fill_requires_capacity(self, tmp_path, mc_dir):
        model = mc_dir / "zoo0" / "model000.safetensors"
        # 200 weights * 1 bit < 8192 payload bits
        code = run("embed", "--in", model, "--lsb", 1,
                   "--synthetic-payload", "1024,5", "--out", tmp_path / "x.safetensors")
        assert code == 4

    def test_lsb_zero_is_usage_error(self, tmp_path, mc_dir):
        model = mc_dir / "zoo0" / "model000.safetensors"
        assert run("embed", "--in", model, "--lsb", 0, "--fill",
                   "--synthetic-payload", "8,1", "--out", tmp_path / "x.safetensors") == 2

    def test_mantissa_guard_and_override(self, tmp_path, mc_dir):
        model = mc_dir / "zoo0" / "model000.safetensors"
        args = ["embed", "--in", model, "--lsb", 32, "--fill",
                "--synthetic-payload", "8,1", "--out", tmp_path / "x.safetensors"]
        assert run(*args) == 2
        assert run(*args, "--allow-exponent") == 0

    def test_missing_input_is_data_error(self, tmp_path):
        assert run("embed", "--in", tmp_path / "nope.safetensors", "--lsb", 8, "--fill",
                   "--synthetic-payload", "8,1", "--out", tmp_path / "x.safetensors") == 3

    def test_payload_file_flag(self, tmp_path, mc_dir):
        model = mc_dir / "zoo0" / "model000.safetensors"
        payload_path = tmp_path / "p.bin"
        payload_path.write_bytes(bytes(range(48)))
        out = tmp_path / "att.safetensors"
        assert run("embed", "--in", model, "--lsb", 8, "--fill",
                   "--payload", payload_path, "--out", out) == 0
        back = tmp_path / "back.bin"
        assert run("extract", "--in", out, "--lsb", 8, "--bits", 48 * 8, "--out", back) == 0
        assert back.read_bytes() == payload_path.read_bytes()

    def test_log_file_sidecar(self, tmp_path, mc_dir):
        model = mc_dir / "zoo0" / "model000.safetensors"
        out_a, out_b = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
        assert run("--log-file", tmp_path / "run.log", "embed", "--in", model,
                   "--lsb", 8, "--fill", "--synthetic-payload", "8,1", "--out", out_a) == 0
        assert run("embed", "--in", model, "--lsb", 8, "--fill",
                   "--synthetic-payload", "8,1", "--out", out_b) == 0
        # logging never leaks into the artifact
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_f16_raw_roundtrip(self, tmp_path):
        rng = np.random.default_rng(12)
        raw = tmp_path / "weights.f16"
        raw.write_bytes(rng.integers(0, 256, size=128, dtype=np.uint8).tobytes())
        out = tmp_path / "att.f16"
        assert run("embed", "--in", raw, "--lsb", 10, "--fill",
                   "--synthetic-payload", "8,3", "--out", out) == 0
        back = tmp_path / "p.bin"
        assert run("extract", "--in", out, "--lsb", 10, "--bits", 64, "--out", back) == 0
        assert back.read_bytes() == Payload.synthetic(8, 3).to_bytes()
        # f16 mantissa is 10 bits; 11 needs the override
        assert run("embed", "--in", raw, "--lsb", 11, "--fill",
                   "--synthetic-payload", "8,3", "--out", out) == 2
        assert run("embed", "--in", raw, "--lsb", 11, "--fill",
                   "--synthetic-payload", "8,3", "--out", out, "--allow-exponent") == 0

    def test_provenance_metadata(self, tmp_path, mc_dir):
        model = mc_dir / "zoo0" / "model000.safetensors"
        out = tmp_path / "att.safetensors"
        run("embed", "--in", model, "--lsb", 8, "--fill",
            "--synthetic-payload", "32,5", "--out", out)
        meta = load_model(out).metadata
        assert meta["attack"] == "lsb-fill"
        assert meta["payload_sha256"] == Payload.synthetic(32, 5).sha256()
        assert len(meta["source_sha256"]) == 64


class TestImagify:
    def test_matches_library(self, tmp_path, mc_dir):
        model = mc_dir / "zoo1" / "model002.safetensors"
        out = tmp_path / "img.pgm"
        assert run("imagify", "--in", model, "--rep", "grayscale-fourpart",
                   "--size", 24, "--out", out) == 0
        expected = resize(grayscale_fourpart(flatten(load_model(model))), 24, 24)
        assert np.array_equal(read_pgm(out), expected)

    def test_native_size(self, tmp_path, mc_dir):
        model = mc_dir / "zoo1" / "model000.safetensors"
        out = tmp_path / "img.pgm"
        assert run("imagify", "--in", model, "--out", out) == 0
        assert read_pgm(out).shape == (30, 30)  # 2 * ceil(sqrt(200))

    def test_unknown_rep(self, tmp_path, mc_dir):
        model = mc_dir / "zoo1" / "model000.safetensors"
        assert run("imagify", "--in", model, "--rep", "nope", "--out", tmp_path / "x.pgm") == 2


class TestSynthMc:
    def test_deterministic(self, tmp_path):
        assert run("synth-mc", "--out", tmp_path / "a", "--zoos", 2, "--models", 2,
                   "--params", 64, "--seed", 9) == 0
        assert run("synth-mc", "--out", tmp_path / "b", "--zoos", 2, "--models", 2,
                   "--params", 64, "--seed", 9) == 0
        for rel in ("zoo0/model000.safetensors", "zoo1/model001.safetensors"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


class TestBuildDatasetTrainScan:
    def test_full_pipeline(self, tmp_path, mc_dir, capsys):
        ds = tmp_path / "ds"
        assert run("build-dataset", "--mc", mc_dir, "--lsb", 8,
                   "--synthetic-payload", "16,2", "--rep", "grayscale-fourpart",
                   "--size", 28, "--train-zoos", "zoo0", "--out", ds) == 0
        manifest, samples = load_dataset(ds)
        assert manifest.lsb == 8
        assert manifest.payload_sha256 == Payload.synthetic(16, 2).sha256()
        splits = {s.zoo: s.split for s in samples}
        assert splits == {"zoo0": "train", "zoo1": "test"}

        det_path = tmp_path / "det.safetensors"
        assert run("train", "--dataset", ds, "--arch", "tiny", "--strategy", "UB",
                   "--ub-lo", 0.5, "--ub-hi", 1.25, "--seed", 7, "--out", det_path) == 0
        detector = load_detector(det_path.read_bytes())
        assert detector.seed == 7
        assert detector.trained_lsb == 8
        assert len(detector.manifest_sha256) == 64

        capsys.readouterr()
        assert run("scan", "--detector", det_path, "--model", mc_dir / "zoo1") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3
        paths = [l.split(",")[0] for l in lines]
        assert paths == sorted(paths)
        for line in lines:
            path, label, d0, d1 = line.split(",")
            assert label in ("0", "1")
            float(d0), float(d1)

        assert run("scan", "--detector", det_path, "--model", ds / "attacked" / "zoo1",
                   "--mode", "knn", "--k", 3) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        for line in lines:
            _, label, v0, v1 = line.split(",")
            assert int(v0) + int(v1) == 3

    def test_train_deterministic_files(self, tmp_path, mc_dir):
        ds = tmp_path / "ds"
        run("build-dataset", "--mc", mc_dir, "--lsb", 8, "--synthetic-payload", "16,2",
            "--size", 28, "--train-zoos", "zoo0", "--out", ds)
        for name in ("d1", "d2"):
            assert run("train", "--dataset", ds, "--arch", "tiny", "--seed", 3,
                       "--out", tmp_path / f"{name}.safetensors") == 0
        assert (tmp_path / "d1.safetensors").read_bytes() == (tmp_path / "d2.safetensors").read_bytes()

    def test_dataset_determinism(self, tmp_path, mc_dir):
        for name in ("x", "y"):
            run("build-dataset", "--mc", mc_dir, "--lsb", 8, "--synthetic-payload", "16,2",
                "--size", 28, "--train-zoos", "zoo0", "--out", tmp_path / name)
        assert (tmp_path / "x/manifest.json").read_bytes() == (tmp_path / "y/manifest.json").read_bytes()


class TestReportCommand:
    def test_report_outputs(self, tmp_path, mc_dir):
        csv_path, json_path = tmp_path / "r.csv", tmp_path / "r.json"
        assert run("report", "--mc", mc_dir, "--lsb", 8, "--synthetic-payload", "16,2",
                   "--train-zoos", "zoo0", "--arch", "tiny", "--size", 28,
                   "--train-per-class", 2, "--runs", 2, "--seed", 1,
                   "--severities", "1-3", "--out-csv", csv_path, "--out-json", json_path,
                   "--save-detectors", tmp_path / "dets") == 0
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "run,model_lsb,eval_type,metric,value"
        metrics = {l.split(",")[3] for l in lines[1:]}
        assert {"oml_accuracy", "benign_accuracy", "weighted_metric",
                "accuracy_x1", "accuracy_x2", "accuracy_x3"} <= metrics
        runs = {l.split(",")[0] for l in lines[1:]}
        assert {"1", "2", "mean", "ci95_low", "ci95_high"} <= runs  # seeds 1 and 2
        doc = json.loads(json_path.read_text())
        assert doc["config"]["lsb"] == [8]
        assert (tmp_path / "dets" / "detector_seed1.safetensors").exists()
        assert (tmp_path / "dets" / "detector_seed2.safetensors").exists()

    def test_report_deterministic(self, tmp_path, mc_dir):
        for name in ("a.csv", "b.csv"):
            assert run("report", "--mc", mc_dir, "--lsb", 8, "--synthetic-payload", "16,2",
                       "--train-zoos", "zoo0", "--arch", "tiny", "--size", 28,
                       "--train-per-class", 2, "--runs", 1, "--seed", 1,
                       "--out-csv", tmp_path / name) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_sweep_one_row_block_per_trained_severity(self, tmp_path, mc_dir):
        csv_path = tmp_path / "sweep.csv"
        assert run("report", "--mc", mc_dir, "--lsb", "2-4", "--synthetic-payload", "16,2",
                   "--train-zoos", "zoo0", "--arch", "tiny", "--size", 28,
                   "--train-per-class", 2, "--runs", 1, "--seed", 0,
                   "--modes", "centroid", "--out-csv", csv_path) == 0
        lines = csv_path.read_text().splitlines()[1:]
        oml = [l for l in lines if l.split(",")[3] == "oml_accuracy" and l.split(",")[0] == "0"]
        assert [l.split(",")[1] for l in oml] == ["2", "3", "4"]


class TestPipeline:
    def test_round_robin_selection(self, mc_dir):
        collection = synth_collection(mc_dir.parent / "mc2", n_zoos=3, n_models=2,
                                      n_params=64, seed=8)
        flats = load_flat_models(collection)
        picked = select_train_pairs(flats, ["zoo0", "zoo2"], 3)
        assert [(fm.zoo) for fm in picked] == ["zoo0", "zoo2", "zoo0"]

    def test_selection_exhaustion(self, mc_dir):
        collection = synth_collection(mc_dir.parent / "mc3", n_zoos=2, n_models=2,
                                      n_params=64, seed=8)
        flats = load_flat_models(collection)
        with pytest.raises(ValueError, match="only"):
            select_train_pairs(flats, ["zoo0"], 5)

    def test_run_detection_run_rows(self, mc_dir):
        from weightsteg.dataset import load_collection

        collection = load_collection(mc_dir)
        cfg = ExperimentConfig(lsb=8, train_zoos=("zoo0",), image_size=28, arch="tiny",
                               train_per_class=2, severities=(1, 2), modes=("centroid", "1nn"))
        res = run_detection_run(collection, Payload.synthetic(16, 2), cfg, seed=0)
        metrics = {(r.eval_type, r.metric) for r in res.rows}
        assert ("centroid", "oml_accuracy") in metrics
        assert ("1nn", "weighted_metric") in metrics
        assert set(res.oml) == {"centroid", "1nn"}
        assert res.epochs_run >= 1

    def test_needs_heldout_zoo(self, mc_dir):
        from weightsteg.dataset import load_collection

        collection = load_collection(mc_dir)
        cfg = ExperimentConfig(lsb=8, train_zoos=("zoo0", "zoo1"), image_size=28,
                               arch="tiny", train_per_class=2)
        with pytest.raises(ValueError, match="zoos"):
            run_detection_run(collection, Payload.synthetic(16, 2), cfg, seed=0)
