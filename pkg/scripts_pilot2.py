"""Long pilot: track the bpd ordering, disc accuracy, and judge agreement."""

import os
import sys
import time

import numpy as np

sys.path.insert(0, "tests")
from helpers import make_digit_corpus
from test_acceptance import train_digit_classifier

from tzk.config import Config
from tzk.data import KnowledgeAssignment, RecordStore, load_mnist, make_batch_fn
from tzk.evaluation import evaluate, sample_grid
from tzk.model import build_model
from tzk.rng import stream
from tzk.trainer import train

CORPUS = "/tmp/tzk_corpus"
TOTAL = int(sys.argv[1]) if len(sys.argv) > 1 else 4000
CHUNK = 500

if not os.path.exists(os.path.join(CORPUS, "train-images-idx3-ubyte")):
    make_digit_corpus(CORPUS, 10_000, 2_000, seed=0)

heads = ["dataset:mnist"] + [f"digit:{d}" for d in range(10)]
cfg = Config(heads=heads, flow_steps=3, seed=11, steps=TOTAL, batch_size=64,
             checkpoint_interval=0, data_dir=CORPUS, mnist_subset=10_000).validate()

train_imgs, train_labels = load_mnist(CORPUS, "train", subset=cfg.mnist_subset, seed=cfg.seed)
store = RecordStore.ingest({"mnist": (train_imgs, train_labels)}, cfg.seed)
assignment = KnowledgeAssignment(["mnist"], c_dim=2, heads=heads)
get_batch = make_batch_fn(store, assignment, cfg.batch_size, cfg.seed)
model = build_model((1, 32, 32), cfg.total_flow_steps, stream(cfg.seed, "init"), tile=cfg.tile,
                    head_specs=cfg.head_specs())

test_imgs, test_labels = load_mnist(CORPUS, "test", seed=cfg.seed)
test_store = RecordStore.ingest({"mnist": (test_imgs, test_labels)}, cfg.seed + 1)

t0 = time.time()
judge = train_digit_classifier(store.pixels.reshape(len(store), -1),
                               store.labels.astype(np.int64))
jacc = float(np.mean(judge(test_store.pixels.reshape(len(test_store), -1)) == test_store.labels))
print(f"judge acc {jacc:.3f} ({time.time()-t0:.0f}s)", flush=True)


def judge_agreement():
    from tzk.errors import DomainError
    hits = 0
    for d in range(10):
        try:
            grid = sample_grid(model, f"digit:{d}", 4, 5, stream(9, "accept-sample", d))
        except DomainError:
            return float("nan")
        tiles = grid.reshape(4, 32, 5, 32).transpose(0, 2, 1, 3).reshape(20, -1)
        hits += int(np.sum(judge(tiles.astype(np.float32) / 255.0) == d))
    return hits / 200.0


t0 = time.time()
done = 0
import dataclasses

from tzk import checkpoint as ckpt_io
from tzk.trainer import AdamState

os.makedirs("/tmp/tzk_pilot_ckpts", exist_ok=True)
adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
while done < TOTAL:
    target = min(done + CHUNK, TOTAL)
    cfg_chunk = dataclasses.replace(cfg, steps=target)
    result = train(model, get_batch, cfg_chunk, start_step=done, adam=adam)
    done = result.final_step
    ckpt_io.save(f"/tmp/tzk_pilot_ckpts/ck_{done:05d}.tzk", cfg.fingerprint(), cfg.seed,
                 done, model.named_parameters(), adam)
    rep = evaluate(model, test_store.pixels, test_store.sources, test_store.labels, seed=cfg.seed)
    prior = rep.condition("prior").mean_bpd
    ds = rep.condition("dataset-conditional").mean_bpd
    dg = rep.condition("digit-conditional").mean_bpd
    digit_stats = [d for d in rep.discriminators if d.head_id.startswith("digit:")]
    acc = float(np.mean([d.accuracy for d in digit_stats]))
    bal = float(np.mean([d.balanced_accuracy for d in digit_stats]))
    print(f"[{(time.time()-t0)/60:5.1f}m] step {done}: prior {prior:.3f} dataset {ds:.3f} "
          f"digit {dg:.3f} | disc acc {acc:.3f} bal {bal:.3f} | judge {judge_agreement():.2f}",
          flush=True)
print("done", flush=True)
