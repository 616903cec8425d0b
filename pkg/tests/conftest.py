"""Session fixtures for the acceptance suite: data corpus and the scaled run."""

import os
import time

import numpy as np
import pytest

from helpers import make_digit_corpus, real_mnist_available


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: spec acceptance criteria")


@pytest.fixture(scope="session")
def digit_corpus(tmp_path_factory):
    """Real MNIST when TZK_DATA_DIR provides it, else the bundled-digit stand-in."""
    real = real_mnist_available()
    if real:
        return {"dir": real, "kind": "mnist", "subset": 10_000}
    out = str(tmp_path_factory.mktemp("corpus"))
    t0 = time.time()
    make_digit_corpus(out, train_n=10_000, test_n=2_000, seed=0)
    print(f"\n[data] no real MNIST found; built handwritten-digit stand-in corpus "
          f"in {time.time() - t0:.1f}s at {out}")
    return {"dir": out, "kind": "synthetic-digits", "subset": 10_000}


@pytest.fixture(scope="session")
def scaled_run(digit_corpus, tmp_path_factory):
    """One shared scaled training run for the trend/discriminator/sample criteria.

    Spec-scale settings: 10k images, 3 flow steps, batch 64, Adam 1e-4; the
    step count is environment-tunable but stays well under the 30k ceiling.
    """
    from tzk.config import Config
    from tzk.data import KnowledgeAssignment, RecordStore, load_mnist, make_batch_fn
    from tzk.evaluation import evaluate
    from tzk.model import build_model
    from tzk.rng import stream
    from tzk.trainer import train

    steps = int(os.environ.get("TZK_ACCEPT_STEPS", "2600"))
    heads = ["dataset:mnist"] + [f"digit:{d}" for d in range(10)]
    cfg = Config(heads=heads, flow_steps=3, seed=11, steps=steps, batch_size=64,
                 checkpoint_interval=0, data_dir=digit_corpus["dir"],
                 mnist_subset=digit_corpus["subset"]).validate()

    train_imgs, train_labels = load_mnist(cfg.data_dir, "train", subset=cfg.mnist_subset,
                                          seed=cfg.seed)
    store = RecordStore.ingest({"mnist": (train_imgs, train_labels)}, cfg.seed)
    assignment = KnowledgeAssignment(["mnist"], c_dim=cfg.c_dim, heads=heads)
    get_batch = make_batch_fn(store, assignment, cfg.batch_size, cfg.seed)
    model = build_model((1, 32, 32), cfg.total_flow_steps, stream(cfg.seed, "init"),
                        tile=cfg.tile, head_specs=cfg.head_specs())

    t0 = time.time()
    result = train(model, get_batch, cfg)
    train_minutes = (time.time() - t0) / 60.0
    print(f"\n[scaled-run] {result.final_step} steps on {digit_corpus['kind']} "
          f"in {train_minutes:.1f} min (aborted={result.aborted})")
    assert not result.aborted

    test_imgs, test_labels = load_mnist(cfg.data_dir, "test", seed=cfg.seed)
    if digit_corpus["kind"] == "mnist" and test_imgs.shape[0] > 2000:
        keep = stream(cfg.seed, "eval-subset").permutation(test_imgs.shape[0])[:2000]
        keep.sort()
        test_imgs, test_labels = test_imgs[keep], test_labels[keep]
    test_store = RecordStore.ingest({"mnist": (test_imgs, test_labels)}, cfg.seed + 1)
    report = evaluate(model, test_store.pixels, test_store.sources, test_store.labels,
                      seed=cfg.seed)
    print("[scaled-run] held-out report:\n" + report.to_text())
    return {"model": model, "cfg": cfg, "report": report, "train_store": store,
            "test_store": test_store, "corpus": digit_corpus, "history": result.history}
