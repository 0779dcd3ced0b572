import json

import numpy as np
import pytest

from genaug import augment as aug
from genaug.cli import main, quantize, read_pnm, write_pnm
from genaug.evaluation import kendall_tau
from genaug.metric import MetricReport
from genaug.nn import save_model
from genaug.zoo import (ManifestEntry, ZooManifest, make_texture_shape_dataset, save_dataset,
                        save_manifest)

from conftest import random_image, tiny_cnn


@pytest.fixture
def ppm(tmp_path):
    img = random_image(np.random.default_rng(7), 8, 8, 3)
    path = tmp_path / "in.ppm"
    write_pnm(path, img)
    return path


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


# -- augment ---------------------------------------------------------------------------

def test_pnm_roundtrip_is_byte_exact(ppm, tmp_path):
    again = tmp_path / "again.ppm"
    write_pnm(again, read_pnm(ppm))
    assert again.read_bytes() == ppm.read_bytes()


def test_flip_twice_restores_bytes(ppm, tmp_path):
    once, twice = tmp_path / "1.ppm", tmp_path / "2.ppm"
    assert run(["augment", "--in", ppm, "--op", "flip", "--out", once])[0] == 0
    assert run(["augment", "--in", once, "--op", "flip", "--out", twice])[0] == 0
    assert twice.read_bytes() == ppm.read_bytes()
    assert once.read_bytes() != ppm.read_bytes()


def test_sobel_constant_image_is_black(tmp_path):
    src, out = tmp_path / "grey.ppm", tmp_path / "out.ppm"
    write_pnm(src, np.full((6, 5, 3), 0.5))
    assert run(["augment", "--in", src, "--op", "sobel", "--out", out])[0] == 0
    assert not read_pnm(out).any()


def test_crop_resize_matches_library(ppm, tmp_path):
    out = tmp_path / "out.ppm"
    argv = ["augment", "--in", ppm, "--op", "crop_resize", "--param", "fraction=0.75", "--out", out]
    assert run(argv)[0] == 0
    expected = quantize(aug.crop_resize(read_pnm(ppm), 0.75))
    got = np.frombuffer(out.read_bytes()[-expected.size:], dtype=np.uint8).reshape(expected.shape)
    np.testing.assert_array_equal(got, expected)


def test_augment_reports_draws(ppm, tmp_path, capsys):
    code, out = run(["augment", "--in", ppm, "--op", "erase", "--seed", 3,
                     "--out", tmp_path / "e.ppm"], capsys)
    assert code == 0
    record = json.loads(out.out)
    assert record["seed"] == 3
    assert [next(iter(d)) for d in record["draws"]] == ["uniform", "uniform", "integers", "integers"]


def test_augment_seed_reproducible(ppm, tmp_path):
    a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
    for path in (a, b):
        run(["augment", "--in", ppm, "--op", "saturation", "--seed", 11, "--out", path])
    assert a.read_bytes() == b.read_bytes()


def test_augment_compose_and_dataset_index(tmp_path):
    data = make_texture_shape_dataset(4, seed=0, size=8)
    save_dataset(tmp_path / "d.gds", data)
    out = tmp_path / "o.ppm"
    assert run(["augment", "--in", tmp_path / "d.gds", "--index", 2, "--op", "flip+saturation",
                "--out", out])[0] == 0
    assert read_pnm(out).shape == (8, 8, 3)
    assert run(["augment", "--in", tmp_path / "d.gds", "--op", "flip", "--out", out])[0] == 2


def test_augment_vap_needs_model(ppm, tmp_path):
    assert run(["augment", "--in", ppm, "--op", "vap", "--out", tmp_path / "v.ppm"])[0] == 2
    model_path = tmp_path / "m.json"
    save_model(tiny_cnn(0, h=8, w=8), model_path)
    assert run(["augment", "--in", ppm, "--op", "vap", "--model", model_path,
                "--out", tmp_path / "v.ppm"])[0] == 0


@pytest.mark.parametrize("argv", [
    ["--op", "rotate"],
    ["--op", "crop_resize", "--param", "fraction=1.5"],
    ["--op", "flip", "--param", "oops"],
])
def test_augment_invalid_inputs_exit_2(ppm, tmp_path, argv):
    assert run(["augment", "--in", ppm, "--out", tmp_path / "x.ppm"] + argv)[0] == 2


def test_augment_bad_file_exits_2(tmp_path):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    assert run(["augment", "--in", bad, "--op", "flip", "--out", tmp_path / "x.ppm"])[0] == 2
    assert run(["augment", "--in", tmp_path / "none.ppm", "--op", "flip",
                "--out", tmp_path / "x.ppm"])[0] == 2


def test_missing_required_argument_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["augment", "--op", "flip"])
    assert exc.value.code == 2


# -- score ---------------------------------------------------------------------------

@pytest.fixture
def scored(tmp_path):
    model_path = tmp_path / "model.json"
    save_model(tiny_cnn(3, h=8, w=8), model_path)
    data_path = tmp_path / "data.gds"
    save_dataset(data_path, make_texture_shape_dataset(24, seed=1, size=8))
    return model_path, data_path


def test_score_row3_preset(scored, tmp_path, capsys):
    model_path, data_path = scored
    out = tmp_path / "r.json"
    code, streams = run(["score", "--model", model_path, "--data", data_path,
                         "--config", "table1_row3", "--out", out], capsys)
    assert code == 0
    report = json.loads(out.read_text())
    assert report["active_augmentations"] == 7
    skipped = [a["name"] for a in report["per_augmentation"] if a["skipped"]]
    assert skipped == ["vap"]
    assert report["samples_scored"] == 24
    assert "exceeds" in streams.err and "vap" in streams.err
    assert report["phi_total"] <= 0.0
    assert report["model_id"] == "model"


def test_score_is_byte_identical_across_runs_and_threads(scored, tmp_path):
    model_path, data_path = scored
    outputs = []
    for i, threads in enumerate([1, 1, 4]):
        out = tmp_path / f"r{i}.json"
        run(["score", "--threads", threads, "--model", model_path, "--data", data_path,
             "--config", "table1_row1", "--sample-count", 10, "--out", out])
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]
    assert json.loads(outputs[0])["samples_scored"] == 10


def test_threads_env_fallback(scored, tmp_path, monkeypatch):
    model_path, data_path = scored
    monkeypatch.setenv("GENAUG_THREADS", "3")
    out_env = tmp_path / "env.json"
    assert run(["score", "--model", model_path, "--data", data_path, "--config", "table1_row2",
                "--out", out_env])[0] == 0
    monkeypatch.setenv("GENAUG_THREADS", "zero")
    assert run(["score", "--model", model_path, "--data", data_path, "--config", "table1_row2",
                "--out", tmp_path / "x.json"])[0] == 2
    monkeypatch.delenv("GENAUG_THREADS")
    out_default = tmp_path / "default.json"
    run(["score", "--model", model_path, "--data", data_path, "--config", "table1_row2",
         "--out", out_default])
    assert out_env.read_bytes() == out_default.read_bytes()


def test_score_config_file_and_errors(scored, tmp_path):
    model_path, data_path = scored
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "sample_count": 8,
                               "entries": [{"kind": "flip", "lambda": 6.0}]}))
    out = tmp_path / "r.json"
    assert run(["score", "--model", model_path, "--data", data_path, "--config", cfg,
                "--out", out])[0] == 0
    assert json.loads(out.read_text())["samples_scored"] == 8
    cfg.write_text(json.dumps({"entries": [{"kind": "flip", "lambda": 0.0}]}))
    assert run(["score", "--model", model_path, "--data", data_path, "--config", cfg,
                "--out", out])[0] == 2
    assert run(["score", "--model", model_path, "--data", data_path, "--config", "no_such_preset",
                "--out", out])[0] == 2
    assert run(["score", "--model", tmp_path / "missing.json", "--data", data_path,
                "--config", "table1_row3", "--out", out])[0] == 2


# -- eval ------------------------------------------------------------------------------

def write_zoo(root, hparams, train_acc, test_acc, phi):
    """A manifest plus one report per model; the models themselves are never opened."""
    root.mkdir(parents=True, exist_ok=True)
    entries = [ManifestEntry(f"m{i:03d}", f"models/m{i:03d}.json", hp, tr, te)
               for i, (hp, tr, te) in enumerate(zip(hparams, train_acc, test_acc))]
    save_manifest(ZooManifest(sorted(hparams[0]), entries), root / "zoo.json")
    reports = root / "reports"
    reports.mkdir(exist_ok=True)
    for e, value in zip(entries, phi):
        report = MetricReport(phi_total=float(value), per_augmentation=[], samples_scored=1,
                              samples_requested=1, seed=0, model_id=e.model_id)
        (reports / f"{e.model_id}.json").write_text(report.to_json())
    return root / "zoo.json", reports


def random_zoo(seed, n_models):
    rng = np.random.default_rng(seed)
    hparams = [{"lr": float(rng.choice([0.1, 0.01])), "bs": int(rng.choice([8, 32])),
                "noise": float(rng.choice([0.0, 0.4]))} for _ in range(n_models)]
    test_acc = rng.uniform(0.5, 0.9, n_models)
    return hparams, np.ones(n_models), test_acc


def eval_cli(tmp_path, manifest, reports, k):
    out = tmp_path / f"eval_k{k}.json"
    assert run(["eval", "--zoo", manifest, "--reports", reports, "--k", k, "--out", out])[0] == 0
    return json.loads(out.read_text())


def test_eval_perfect_metric_scores_one(tmp_path):
    hparams, train, test = random_zoo(0, 16)
    manifest, reports = write_zoo(tmp_path / "z", hparams, train, test, -(train - test))
    for k in (0, 1, 2):
        assert eval_cli(tmp_path, manifest, reports, k)["cmi"]["score"] == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_eval_permuted_metric_null(tmp_path, seed):
    hparams, train, test = random_zoo(100 + seed, 400)
    phi = np.random.default_rng(seed).permutation(-(train - test))
    manifest, reports = write_zoo(tmp_path / "z", hparams, train, test, phi)
    result = eval_cli(tmp_path, manifest, reports, 1)
    assert 0.0 <= result["cmi"]["score"] <= 0.05


def test_eval_on_trained_zoo_structure(zoo_pipeline, tmp_path):
    pipeline = zoo_pipeline(0, 1)
    result = eval_cli(tmp_path, pipeline.manifest, pipeline.reports, 1)
    cmi = result["cmi"]
    assert 0.0 <= cmi["score"] <= 1.0
    assert sorted(cmi["per_subset"]) == ["batch_size", "label_noise", "learning_rate"]
    assert result["n_models"] == 16 and result["n_pairs"] == 120
    assert result["metric_field"] == "phi_per_sample"
    phi = [row["phi"] for row in result["gap_table"]]
    gap = [row["gap"] for row in result["gap_table"]]
    assert result["kendall_tau"] == pytest.approx(kendall_tau(phi, gap))


def test_eval_missing_report_exits_2(tmp_path):
    hparams, train, test = random_zoo(1, 4)
    manifest, reports = write_zoo(tmp_path / "z", hparams, train, test, [-1, -2, -3, -4])
    (reports / "m002.json").unlink()
    assert run(["eval", "--zoo", manifest, "--reports", reports, "--out", tmp_path / "e.json"])[0] == 2
    assert run(["eval", "--zoo", manifest, "--reports", manifest, "--out", tmp_path / "e.json"])[0] == 2


def test_eval_k_too_large_reports_error(tmp_path):
    hparams, train, test = random_zoo(2, 8)
    manifest, reports = write_zoo(tmp_path / "z", hparams, train, test, -(train - test))
    result = eval_cli(tmp_path, manifest, reports, 3)
    assert result["cmi"]["score"] is None and "error" in result["cmi"]


# -- zoo-gen ---------------------------------------------------------------------------

def test_zoo_gen_default_grid(zoo_pipeline):
    pipeline = zoo_pipeline(0, 1)
    assert set(pipeline.exit_codes) == {0}
    manifest = json.loads(pipeline.manifest.read_text())
    assert len(manifest["entries"]) == 16
    assert sorted(manifest["axes"]) == ["batch_size", "label_noise", "learning_rate"]
    for e in manifest["entries"]:
        assert (pipeline.zoo_dir / e["path"]).exists()
        assert 0.0 <= e["test_acc"] <= 1.0


def test_zoo_gen_same_seed_same_models(tmp_path, capsys):
    grid = json.dumps({"axes": {"learning_rate": [0.1, 0.05], "label_noise": [0.0, 0.4]},
                       "replicates": 1, "epochs": 3, "n_train": 32, "n_test": 32})
    summaries = []
    for name in ("a", "b"):
        code, out = run(["zoo-gen", "--out", tmp_path / name, "--grid", grid, "--seed", 9], capsys)
        assert code == 0
        summaries.append(json.loads(out.out)["models"])
    assert summaries[0] == summaries[1]
    for e in json.loads((tmp_path / "a" / "zoo.json").read_text())["entries"]:
        bin_a = (tmp_path / "a" / e["path"]).with_suffix(".bin").read_bytes()
        bin_b = (tmp_path / "b" / e["path"]).with_suffix(".bin").read_bytes()
        assert bin_a == bin_b


def test_zoo_gen_grid_file_and_alias(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"axes": {"batch_size": [8, 16], "dropout_rate": [0.0, 0.5]},
                                "replicates": 1, "epochs": 1, "n_train": 16, "n_test": 16}))
    assert run(["zoo_gen", "--out", tmp_path / "z", "--grid", grid])[0] == 0
    assert len(json.loads((tmp_path / "z" / "zoo.json").read_text())["entries"]) == 4


@pytest.mark.parametrize("grid", [
    '{"axes": {"learning_rate": [0.1, 0.01]}}',
    '{"axes": {"learning_rate": [0.1], "batch_size": [8, 32]}}',
    "not json",
])
def test_zoo_gen_invalid_grid_exits_2(tmp_path, grid):
    assert run(["zoo-gen", "--out", tmp_path / "z", "--grid", grid])[0] == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_zoo_gen_divergence_exits_3(tmp_path):
    grid = json.dumps({"axes": {"learning_rate": [1e30, 1e31], "batch_size": [8, 16]},
                       "replicates": 1, "epochs": 2, "n_train": 16, "n_test": 16})
    assert run(["zoo-gen", "--out", tmp_path / "z", "--grid", grid])[0] == 3
