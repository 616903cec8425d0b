"""Pilot for the scaled acceptance run; not part of the package or tests."""

import os
import sys
import time

import numpy as np

sys.path.insert(0, "tests")
from helpers import make_digit_corpus

from tzk.config import Config
from tzk.data import KnowledgeAssignment, RecordStore, load_mnist, make_batch_fn
from tzk.evaluation import evaluate, sample_grid
from tzk.model import build_model
from tzk.rng import stream
from tzk.trainer import train

CORPUS = "/tmp/tzk_corpus"
STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 600

if not os.path.exists(os.path.join(CORPUS, "train-images-idx3-ubyte")):
    t0 = time.time()
    make_digit_corpus(CORPUS, 10_000, 2_000, seed=0)
    print(f"corpus built in {time.time()-t0:.1f}s", flush=True)

heads = ["dataset:mnist"] + [f"digit:{d}" for d in range(10)]
cfg = Config(heads=heads, flow_steps=3, seed=11, steps=STEPS, batch_size=64,
             checkpoint_interval=0, data_dir=CORPUS, mnist_subset=10_000).validate()

train_imgs, train_labels = load_mnist(CORPUS, "train", subset=cfg.mnist_subset, seed=cfg.seed)
store = RecordStore.ingest({"mnist": (train_imgs, train_labels)}, cfg.seed)
assignment = KnowledgeAssignment(["mnist"], c_dim=2, heads=heads)
get_batch = make_batch_fn(store, assignment, cfg.batch_size, cfg.seed)

model = build_model((1, 32, 32), cfg.total_flow_steps, stream(cfg.seed, "init"), tile=cfg.tile,
                    head_specs=cfg.head_specs())

t0 = time.time()
log_every = 50


def log(line):
    if line.startswith("step"):
        return
    step = int(line.split("\t")[0])
    if step % log_every == 0:
        print(f"[{time.time()-t0:7.1f}s] {line}", flush=True)


result = train(model, get_batch, cfg, log=log)
print(f"trained {result.final_step} steps in {time.time()-t0:.0f}s aborted={result.aborted}", flush=True)

test_imgs, test_labels = load_mnist(CORPUS, "test", seed=cfg.seed)
test_store = RecordStore.ingest({"mnist": (test_imgs, test_labels)}, cfg.seed + 1)
t0 = time.time()
report = evaluate(model, test_store.pixels, test_store.sources, test_store.labels, seed=cfg.seed)
print(f"eval in {time.time()-t0:.0f}s", flush=True)
print(report.to_text(), flush=True)

digit_heads = [d for d in report.discriminators if d.head_id.startswith("digit:")]
pooled = np.mean([d.accuracy for d in digit_heads])
balanced = np.mean([d.balanced_accuracy for d in digit_heads])
print(f"digit disc pooled acc {pooled:.4f} balanced {balanced:.4f}", flush=True)

grid = sample_grid(model, "digit:3", 2, 5, stream(7, "sample", "digit:3"))
print("sample grid stats:", grid.min(), grid.max(), grid.mean().round(1), flush=True)
