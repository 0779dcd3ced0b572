import numpy as np
import pytest

from genaug.nn import Conv2d, Dense, Flatten, MaxPool2d, Model, Relu, Softmax


def random_image(rng, h=8, w=8, c=3):
    return rng.uniform(0.0, 1.0, size=(h, w, c))


def tiny_cnn(seed, h=6, w=6, c=3, classes=3, padding="same", pool=True):
    rng = np.random.default_rng(seed)
    layers = [Conv2d(rng.normal(0, 0.5, (4, c, 3, 3)), rng.normal(0, 0.1, 4), padding=padding), Relu()]
    ho, wo = (h, w) if padding == "same" else (h - 2, w - 2)
    if pool:
        layers.append(MaxPool2d(2))
        ho, wo = ho // 2, wo // 2
    layers += [Flatten(), Dense(rng.normal(0, 0.5, (5, ho * wo * 4)), rng.normal(0, 0.1, 5)), Relu(),
               Dense(rng.normal(0, 0.5, (classes, 5)), rng.normal(0, 0.1, classes)), Softmax()]
    return Model(layers, (h, w, c), classes,
                 mean=rng.uniform(0.3, 0.6, c), std=rng.uniform(0.2, 0.5, c))


def linear_model(seed, h=2, w=2, c=1, classes=3, scale=1.0):
    rng = np.random.default_rng(seed)
    W = rng.normal(0, scale, (classes, h * w * c))
    b = rng.normal(0, 0.1, classes)
    return Model([Flatten(), Dense(W, b), Softmax()], (h, w, c), classes)


def mirror_model(h=4, w=4, c=3, scale=1.0):
    """Class 0 iff the left half is brighter than the right half."""
    left = np.zeros((h, w, c))
    left[:, : w // 2, :] = 1.0
    left[:, w - w // 2:, :] = -1.0
    W = np.stack([left.ravel(), -left.ravel()]) * scale
    return Model([Flatten(), Dense(W, np.zeros(2)), Softmax()], (h, w, c), 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class ZooRun:
    """A synthetic zoo produced and scored through the CLI."""

    def __init__(self, root, seed, threads):
        self.root = root
        self.seed = seed
        self.threads = threads
        self.zoo_dir = root / "zoo"
        self.reports = root / "reports"
        self.eval_path = root / "eval.json"
        self.exit_codes = []

    @property
    def manifest(self):
        return self.zoo_dir / "zoo.json"


def run_pipeline(root, seed, threads, config="table1_row3", k=2):
    """zoo-gen, then score every model, then eval; stage wall times land in ``run.seconds``."""
    import json
    import time
    from genaug.cli import main

    run = ZooRun(root, seed, threads)
    t = ["--threads", str(threads)]
    t0 = time.perf_counter()
    run.exit_codes.append(main(["zoo-gen", "--out", str(run.zoo_dir), "--seed", str(seed)] + t))
    t1 = time.perf_counter()
    manifest = json.loads(run.manifest.read_text())
    for e in manifest["entries"]:
        run.exit_codes.append(main([
            "score", "--model", str(run.zoo_dir / e["path"]), "--data", str(run.zoo_dir / "train.gds"),
            "--config", config, "--out", str(run.reports / f"{e['model_id']}.json")] + t))
    t2 = time.perf_counter()
    run.exit_codes.append(main(["eval", "--zoo", str(run.manifest), "--reports", str(run.reports),
                                "--k", str(k), "--out", str(run.eval_path)] + t))
    run.seconds = {"zoo-gen": t1 - t0, "score": t2 - t1, "eval": time.perf_counter() - t2}
    return run


@pytest.fixture(scope="session")
def zoo_pipeline(tmp_path_factory):
    """``zoo_pipeline(seed, threads)`` runs zoo-gen, score and eval once per argument pair."""
    cache = {}

    def get(seed=0, threads=1):
        key = (seed, threads)
        if key not in cache:
            cache[key] = run_pipeline(tmp_path_factory.mktemp(f"zoo_s{seed}_t{threads}"), seed, threads)
        return cache[key]
    return get


# Acceptance results, one line per criterion, echoed after the run regardless of capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
