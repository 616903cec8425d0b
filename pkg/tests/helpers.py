"""Shared test utilities: pinned toy models, stub generators, fixture data."""

import os

import numpy as np

from tzk.data import write_idx
from tzk.flows import FlowStack, vector_flow
from tzk.heads import BasePrior, KnowledgeHead
from tzk.model import TzkModel
from tzk.objective import Batch, HeadSupervision


class ZeroRng:
    """Stub generator whose normal draws are all zero (reparam at the mode)."""

    def standard_normal(self, shape):
        return np.zeros(shape)

    def random(self, shape, dtype=np.float64):
        return np.zeros(shape, dtype=dtype)

    def integers(self, n):
        return 0


def zero_mlp_output(mlp):
    """Pin an MLP to output exactly zero regardless of input."""
    final = mlp.linears[-1]
    final.weight.data = np.zeros_like(final.weight.data)
    final.bias.data = np.zeros_like(final.bias.data)


def pinned_model(dim=1, c_dim=1, n_heads=1, dtype=np.float64, hidden=4, depth=2):
    """Identity flow, standard base, heads pinned to (0,1) stats and 0 logits."""
    rng = np.random.default_rng(0)
    model = TzkModel(FlowStack([]), BasePrior(dim, dtype), (dim, 1, 1), dtype)
    for i in range(n_heads):
        head = KnowledgeHead(f"k{i}", c_dim, (dim, 1, 1), rng, hidden=hidden, depth=depth,
                             private_layers=0, dtype=dtype)
        for mlp in (head.disc_t, head.disc_c, head.c_regressor, head.z_prior_regressor):
            zero_mlp_output(mlp)
        model.add_head(head)
    return model


def toy_model(dim=2, c_dim=2, n_heads=1, flow_steps=2, dtype=np.float64, hidden=6,
              depth=3, private_layers=2, seed=0, head_ids=None):
    """Small random model with a real vector flow, for numeric tests."""
    rng = np.random.default_rng(seed)
    flow = vector_flow(dim, flow_steps, rng, dtype)
    for name, p in flow.named_params():
        if "log_scale" in name or "bias" in name:
            p.data = (0.2 * rng.standard_normal(p.shape)).astype(dtype)
    model = TzkModel(flow, BasePrior(dim, dtype), (dim, 1, 1), dtype)
    ids = head_ids or [f"k{i}" for i in range(n_heads)]
    for hid in ids:
        model.add_head(KnowledgeHead(hid, c_dim, (dim, 1, 1), rng, hidden=hidden, depth=depth,
                                     private_layers=private_layers, dtype=dtype))
    return model


def real_mnist_available() -> str | None:
    """Path to a real MNIST root when TZK_DATA_DIR points at one."""
    root = os.environ.get("TZK_DATA_DIR")
    if not root:
        return None
    for stem in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                 "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"):
        if not (os.path.exists(os.path.join(root, stem))
                or os.path.exists(os.path.join(root, stem + ".gz"))):
            return None
    return root


def make_digit_corpus(out_dir, train_n=10_000, test_n=2_000, seed=0):
    """MNIST-shaped corpus from real 8x8 handwritten digits.

    sklearn's bundled digits are upscaled to 28x28 and augmented with small
    shifts/rotations/intensity jitter; base images are split before
    augmentation so the held-out set never shares a source image with
    training. Files use the real MNIST names so ingestion is identical.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    digits = load_digits()
    base = (digits.images / 16.0 * 255.0).astype(np.float64)  # (1797, 8, 8)
    labels = digits.target.astype(np.uint8)
    rng = np.random.default_rng(seed)
    holdout = rng.random(base.shape[0]) < 0.2

    big = np.stack([ndimage.zoom(img, 3.5, order=1) for img in base])  # (N, 28, 28)

    def augment(pool_idx, n, stream_seed):
        r = np.random.default_rng(stream_seed)
        picks = pool_idx[r.integers(0, pool_idx.size, n)]
        out = np.empty((n, 28, 28), dtype=np.uint8)
        for i, b in enumerate(picks):
            img = big[b]
            img = ndimage.rotate(img, float(r.uniform(-12, 12)), reshape=False, order=1)
            img = ndimage.shift(img, (float(r.uniform(-2, 2)), float(r.uniform(-2, 2))), order=1)
            img = img * float(r.uniform(0.75, 1.0))
            out[i] = np.clip(np.round(img), 0, 255).astype(np.uint8)
        return out, labels[picks]

    os.makedirs(out_dir, exist_ok=True)
    train_imgs, train_labels = augment(np.flatnonzero(~holdout), train_n, seed + 1)
    test_imgs, test_labels = augment(np.flatnonzero(holdout), test_n, seed + 2)
    write_idx(os.path.join(out_dir, "train-images-idx3-ubyte"), train_imgs)
    write_idx(os.path.join(out_dir, "train-labels-idx1-ubyte"), train_labels)
    write_idx(os.path.join(out_dir, "t10k-images-idx3-ubyte"), test_imgs)
    write_idx(os.path.join(out_dir, "t10k-labels-idx1-ubyte"), test_labels)
    return out_dir


def simple_batch(images, kappa_by_head, c_dims, c_values=None, dtype=np.float64):
    """Batch from per-head kappa arrays; characteristics latent unless given."""
    b = images.shape[0]
    sup = {}
    for hid, kappa in kappa_by_head.items():
        kappa = np.asarray(kappa, dtype=np.int8)
        c_dim = c_dims[hid]
        if c_values is not None and hid in c_values:
            cv = np.asarray(c_values[hid], dtype=dtype)
            obs = np.ones(b, dtype=bool)
        else:
            cv = np.zeros((b, c_dim), dtype=dtype)
            obs = np.zeros(b, dtype=bool)
        sup[hid] = HeadSupervision(kappa, cv, obs)
    batch = Batch(images=np.asarray(images, dtype=dtype), sup=sup)
    batch.validate()
    return batch
