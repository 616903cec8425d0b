"""Per-knowledge probabilistic heads over a shared flow.

A head bundles two discriminators (presence given the latent code, presence
given the characteristic), a characteristic regressor, a conditional prior
over the latent built from a Gaussian regressor plus a small private flow,
and a fixed standard-normal characteristic prior. Discriminators and
regressors consume Z = f^-1(T): the flow is a bijection, so conditioning on
Z equals conditioning on T, and the shared flow doubles as the feature
extractor for every head.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .flows import FlowStack, elementwise_flow
from .tensor import Tensor, gaussian_logpdf, prelu, reparam_sample

LOG_SIGMA_RANGE = 7.0   # keeps one-sample MC training away from variance collapse
LOGIT_RANGE = 30.0


class Linear:
    def __init__(self, n_in, n_out, rng, dtype=np.float32, name="linear"):
        lim = np.sqrt(6.0 / (n_in + n_out))
        self.weight = Tensor(rng.uniform(-lim, lim, (n_in, n_out)).astype(dtype),
                             requires_grad=True, name=f"{name}/W")
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True, name=f"{name}/b")

    def named_params(self):
        return [(self.weight.name, self.weight), (self.bias.name, self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        return x.matmul(self.weight) + self.bias


class Mlp:
    """Stack of linear layers with learnable-slope PReLU between them."""

    def __init__(self, n_in, n_out, rng, hidden=70, depth=4, dtype=np.float32, name="mlp"):
        dims = [n_in] + [hidden] * (depth - 1) + [n_out]
        self.linears = [Linear(dims[i], dims[i + 1], rng, dtype, name=f"{name}/l{i}")
                        for i in range(depth)]
        self.slopes = [Tensor(np.full(dims[i + 1], 0.25, dtype=dtype), requires_grad=True,
                              name=f"{name}/l{i}/prelu")
                       for i in range(depth - 1)]

    def named_params(self):
        out = []
        for i, lin in enumerate(self.linears):
            out.extend(lin.named_params())
            if i < len(self.slopes):
                out.append((self.slopes[i].name, self.slopes[i]))
        return out

    def __call__(self, x: Tensor) -> Tensor:
        for i, lin in enumerate(self.linears):
            x = lin(x)
            if i < len(self.slopes):
                x = prelu(x, self.slopes[i])
        return x


class BasePrior:
    """Learnable diagonal Gaussian over the flat latent, initialized standard."""

    def __init__(self, dim, dtype=np.float32, name="base"):
        self.mu = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True, name=f"{name}/mu")
        self.log_sigma = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True, name=f"{name}/log_sigma")

    def named_params(self):
        return [(self.mu.name, self.mu), (self.log_sigma.name, self.log_sigma)]

    def logpdf(self, z_flat: Tensor) -> Tensor:
        return gaussian_logpdf(z_flat, self.mu, self.log_sigma)

    def sample(self, noise) -> Tensor:
        return reparam_sample(self.mu, self.log_sigma, noise)


class KnowledgeHead:
    """One knowledge type: discriminators, regressors, and a conditional prior."""

    def __init__(self, head_id, c_dim, z_shape, rng, hidden=70, depth=4,
                 private_layers=4, dtype=np.float32):
        if c_dim < 1:
            raise ContractViolation(f"head {head_id!r}: c_dim must be >= 1")
        self.id = head_id
        self.c_dim = c_dim
        self.z_shape = tuple(z_shape)
        self.z_dim = int(np.prod(z_shape))
        base = f"head/{head_id}"
        self.disc_t = Mlp(self.z_dim, 1, rng, hidden, depth, dtype, name=f"{base}/disc_t")
        self.disc_c = Mlp(c_dim, 1, rng, hidden, depth, dtype, name=f"{base}/disc_c")
        self.c_regressor = Mlp(self.z_dim, 2 * c_dim, rng, hidden, depth, dtype, name=f"{base}/c_regressor")
        self.z_prior_regressor = Mlp(c_dim, 2 * self.z_dim, rng, hidden, depth, dtype,
                                     name=f"{base}/z_prior_regressor")
        self.private_flow: FlowStack = elementwise_flow(self.z_shape, private_layers, dtype,
                                                        prefix=f"{base}/private")

    def named_params(self):
        out = []
        for part in (self.disc_t, self.disc_c, self.c_regressor, self.z_prior_regressor,
                     self.private_flow):
            out.extend(part.named_params())
        return out

    def disc_param_tensors(self):
        return [t for _, t in self.disc_t.named_params() + self.disc_c.named_params()]

    # -- building blocks on the flat latent --------------------------------

    def logit_t(self, z_flat: Tensor) -> Tensor:
        return self.disc_t(z_flat).clamp(-LOGIT_RANGE, LOGIT_RANGE).reshape(-1)

    def logit_c(self, c: Tensor) -> Tensor:
        if c.shape[-1] != self.c_dim:
            raise ContractViolation(f"head {self.id!r}: characteristic dim {c.shape[-1]} != {self.c_dim}")
        return self.disc_c(c).clamp(-LOGIT_RANGE, LOGIT_RANGE).reshape(-1)

    def c_stats(self, z_flat: Tensor):
        out = self.c_regressor(z_flat)
        return out[:, :self.c_dim], out[:, self.c_dim:].clamp(-LOG_SIGMA_RANGE, LOG_SIGMA_RANGE)

    def z_prior_stats(self, c: Tensor):
        if c.shape[-1] != self.c_dim:
            raise ContractViolation(f"head {self.id!r}: characteristic dim {c.shape[-1]} != {self.c_dim}")
        out = self.z_prior_regressor(c)
        return out[:, :self.z_dim], out[:, self.z_dim:].clamp(-LOG_SIGMA_RANGE, LOG_SIGMA_RANGE)

    def log_p_t_given_c_from_z(self, z_flat: Tensor, ld_shared_inv: Tensor, c: Tensor) -> Tensor:
        """log p(T | C=c, presence) evaluated from the shared latent code."""
        n = z_flat.shape[0]
        z0, ld_priv = self.private_flow.inverse(z_flat.reshape(n, *self.z_shape))
        mu, log_sigma = self.z_prior_stats(c)
        return gaussian_logpdf(z0.reshape(n, self.z_dim), mu, log_sigma) + ld_priv + ld_shared_inv


def _log_bernoulli(logit: Tensor, kappa) -> Tensor:
    """log p(kappa | logit) in log space; kappa is 0/1 per sample or scalar."""
    k = np.asarray(kappa)
    if not np.all((k == 0) | (k == 1)):
        raise ContractViolation("kappa must be 0 or 1")
    sign = Tensor((2.0 * k - 1.0).astype(logit.dtype))
    return (logit * sign).log_sigmoid()


# -- whole-observation operations ---------------------------------------------


def flatten(z: Tensor) -> Tensor:
    return z.reshape(z.shape[0], -1)


def log_p_t(t: Tensor, flow: FlowStack, base: BasePrior) -> Tensor:
    """Unconditional log-density via change of variables, per sample."""
    z, ld = flow.inverse(t)
    return base.logpdf(flatten(z)) + ld


def log_p_t_given_ck(t: Tensor, c: Tensor, head: KnowledgeHead, flow: FlowStack) -> Tensor:
    z, ld = flow.inverse(t)
    return head.log_p_t_given_c_from_z(flatten(z), ld, c)


def log_p_c_given_tk(c: Tensor, t: Tensor, head: KnowledgeHead, flow: FlowStack) -> Tensor:
    z, _ = flow.inverse(t)
    mu, log_sigma = head.c_stats(flatten(z))
    return gaussian_logpdf(c, mu, log_sigma)


def sample_c_given_tk(t: Tensor, head: KnowledgeHead, flow: FlowStack, noise) -> Tensor:
    z, _ = flow.inverse(t)
    mu, log_sigma = head.c_stats(flatten(z))
    return reparam_sample(mu, log_sigma, noise)


def log_p_kappa_given_t(t: Tensor, kappa, head: KnowledgeHead, flow: FlowStack) -> Tensor:
    z, _ = flow.inverse(t)
    return _log_bernoulli(head.logit_t(flatten(z)), kappa)


def log_p_kappa_given_c(c: Tensor, kappa, head: KnowledgeHead) -> Tensor:
    return _log_bernoulli(head.logit_c(c), kappa)


def log_p_c_prior(c: Tensor) -> Tensor:
    """Characteristic prior: fixed standard normal (scale is unidentifiable
    when characteristics are never observed, so the prior anchors it)."""
    zero = np.zeros((), dtype=c.dtype)
    return gaussian_logpdf(c, zero, zero)


def sample_c_prior(noise) -> Tensor:
    return noise if isinstance(noise, Tensor) else Tensor(noise)


def sample_t_given_ck(c: Tensor, head: KnowledgeHead, flow: FlowStack, noise) -> Tensor:
    """Draw T from the conditional prior; differentiable end to end."""
    mu, log_sigma = head.z_prior_stats(c)
    z0 = reparam_sample(mu, log_sigma, noise)
    n = z0.shape[0]
    z, _ = head.private_flow.forward(z0.reshape(n, *head.z_shape))
    t, _ = flow.forward(z)
    return t
