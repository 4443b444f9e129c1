"""Two-stage training for networks with generated convolutions.

Stage 1 projects a dense teacher onto the factor space of every generated
layer, either by minimizing the l2 distance with RAdam or by truncated
SVD.  Stage 2 runs quantization-aware knowledge distillation: mini-batch
updates of all parameters on the gradient of

    L = L_KD + lambda * L_ort

where L_KD blends a temperature-softened KL term against the teacher with
plain cross entropy against the labels, and L_ort is the multi-level
orthogonality penalty on the stored factors.

Everything is deterministic given the seed: initialization draws from one
generator seeded with the run seed, and the shuffle order of epoch e comes
from a fresh PCG64 generator seeded with (seed, e).
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import factorfile, generator, nn, tensor
from .errors import ConfigError, DivergenceError, ShapeError
from .optim import RAdam

CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("epoch", "lr", "loss_kd", "loss_ort", "train_acc", "test_acc")


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def kd_loss(
    student_logits: np.ndarray,
    labels: np.ndarray,
    teacher_logits: np.ndarray | None = None,
    temperature: float = 3.0,
    beta: float = 0.9,
):
    """Distillation objective and its analytic gradient wrt student logits.

    loss = beta * T^2 * KL(teacher_T || student_T) + (1-beta) * CE(labels)
    averaged over the batch.  Without teacher logits the loss is plain
    cross entropy.  Returns (loss, d_logits).
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    s = np.asarray(student_logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = s.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape}, expected ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"labels out of range for {c} classes")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    log_p = log_softmax(s)
    p = np.exp(log_p)
    ce = -log_p[np.arange(n), labels].mean()
    if teacher_logits is None:
        return ce, (p - onehot) / n
    t = np.asarray(teacher_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeError(f"teacher logits {t.shape} vs student {s.shape}")
    log_p_t = log_softmax(s / temperature)
    q_t = softmax(t / temperature)
    kl = (q_t * (np.log(q_t) - log_p_t)).sum(axis=1).mean()
    loss = beta * temperature**2 * kl + (1.0 - beta) * ce
    p_t = np.exp(log_p_t)
    d = (beta * temperature * (p_t - q_t) + (1.0 - beta) * (p - onehot)) / n
    return loss, d


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def _normalized_gram_penalty(u: np.ndarray):
    """Penalty ||U~^T U~ - I||_F^2 with columns scaled by 1/||u_j||^2,
    plus its gradient wrt U.  Shared by the coeff and mixer terms."""
    n = np.einsum("ij,ij->j", u, u)
    if np.any(n == 0.0):
        raise DivergenceError("zero column encountered in orthogonality penalty")
    inv = 1.0 / n
    ut = u * inv[None, :]
    e = ut.T @ ut - np.eye(u.shape[1])
    value = float(np.sum(e * e))
    d_ut = 4.0 * ut @ e
    d_inv = np.einsum("ij,ij->j", d_ut, u)
    d_n = -(inv**2) * d_inv
    d_u = d_ut * inv[None, :] + 2.0 * u * d_n[None, :]
    return value, d_u


def ortho_reg(factors: generator.TwoLevelFactors):
    """Multi-level orthogonality penalty on the raw factors.

    Per cross slice i: ||basis_i basis_i^T - I||_F^2 pushes the basis rows
    orthonormal, and the normalized-column gram penalty pushes the coeff
    columns orthogonal; the same column penalty applies to the mixer.
    Terms exist only for active levels.  Returns (value, FactorGrads).
    """
    p = factors.plan
    value = 0.0
    d_basis = None
    d_coeff = np.zeros_like(factors.coeff)
    d_mixer = None
    if p.intra_active:
        d_basis = np.zeros_like(factors.basis)
        eye = np.eye(p.n_basis)
        for i in range(p.n_cross):
            w = factors.basis[i]
            e = w @ w.T - eye
            value += float(np.sum(e * e))
            d_basis[i] = 4.0 * e @ w
            v, d = _normalized_gram_penalty(factors.coeff[i])
            value += v
            d_coeff[i] = d
    if p.cross_active:
        v, d_mixer = _normalized_gram_penalty(factors.mixer)
        value += v
    return value, generator.FactorGrads(basis=d_basis, coeff=d_coeff, mixer=d_mixer)


def svd_init(target: np.ndarray, plan: generator.GenPlan):
    """Initialize factors by truncated SVD of the target kernel tensor.

    The cross level keeps the top n_cross singular directions of the
    (c_out, c_in*k*k) view; each resulting basis kernel is then factorized
    at rank n_basis.  Returns (factors, relative residual).
    """
    target = np.asarray(target, dtype=np.float64)
    want = (plan.c_out, plan.c_in, plan.k, plan.k)
    if target.shape != want:
        raise ShapeError(f"target shape {target.shape}, expected {want}")
    flat = target.reshape(plan.c_out, -1)
    if plan.cross_active:
        u, s, vt = tensor.svd(flat)
        root = np.sqrt(s[: plan.n_cross])
        mixer = u[:, : plan.n_cross] * root[None, :]
        w_cross = root[:, None] * vt[: plan.n_cross]
    else:
        mixer = None
        w_cross = flat
    w_cross = w_cross.reshape(plan.n_cross, plan.c_in, plan.kk)
    if plan.intra_active:
        basis = np.zeros((plan.n_cross, plan.n_basis, plan.kk))
        coeff = np.zeros((plan.n_cross, plan.c_in, plan.n_basis))
        for i in range(plan.n_cross):
            u, s, vt = tensor.svd(w_cross[i])
            root = np.sqrt(s[: plan.n_basis])
            coeff[i] = u[:, : plan.n_basis] * root[None, :]
            basis[i] = root[:, None] * vt[: plan.n_basis]
    else:
        basis, coeff = None, w_cross
    factors = generator.TwoLevelFactors(plan=plan, basis=basis, coeff=coeff,
                                        mixer=mixer)
    factors.validate()
    built = generator.generate(factors, quantized=False)
    denom = max(float(np.linalg.norm(target)), 1e-30)
    residual = float(np.linalg.norm(built - target)) / denom
    return factors, residual


def l2_project_init(
    target: np.ndarray,
    plan: generator.GenPlan,
    rng: np.random.Generator | None = None,
    iters: int = 3000,
    lr: float = 0.02,
    quantized: bool = False,
    warm_start: bool = True,
    end_lr: float = 1e-6,
):
    """Project a dense kernel tensor onto the factor space by minimizing
    ||target - generated||_F^2 with RAdam.

    By default the iteration warm-starts from the truncated-SVD factors
    (which makes the whole procedure deterministic) and decays the step
    size exponentially over the second half of the run; a constant step
    size leaves a wander floor well above the attainable residual.  With
    warm_start=False the start is random and rng must be given.  Returns
    (factors, relative Frobenius residual).
    """
    target = np.asarray(target, dtype=np.float64)
    want = (plan.c_out, plan.c_in, plan.k, plan.k)
    if target.shape != want:
        raise ShapeError(f"target shape {target.shape}, expected {want}")
    if warm_start:
        factors, _ = svd_init(target, plan)
    else:
        if rng is None:
            raise ConfigError("random-start projection needs an rng")
        factors = generator.init_random(plan, rng)
    params = [nn.Param(name, getattr(factors, name))
              for name in ("basis", "coeff", "mixer")
              if getattr(factors, name) is not None]
    opt = RAdam(params, lr=lr)
    denom = max(float(np.linalg.norm(target)), 1e-30)
    tail_start = iters // 2
    decay = (end_lr / lr) ** (1.0 / max(iters - tail_start, 1))
    for it in range(iters):
        fwd = generator.forward(factors, quantized=quantized)
        diff = fwd.weight - target
        loss = float(np.sum(diff * diff))
        if not np.isfinite(loss):
            raise DivergenceError("projection loss became non-finite", iteration=it)
        grads = generator.backward(factors, fwd, 2.0 * diff)
        for p in params:
            p.grad[...] = getattr(grads, p.name)
        opt.step()
        if it >= tail_start:
            opt.lr *= decay
    built = generator.generate(factors, quantized=quantized)
    residual = float(np.linalg.norm(built - target)) / denom
    return factors, residual


@dataclass
class TrainConfig:
    """Everything that defines one training run."""

    arch: str = "C32K5S2-C32K5S1-C32K5S1-AvgPool3-FC10"
    in_channels: int = 1
    in_size: int = 28
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.002
    lr_decay: float = 0.98
    weight_decay: float = 5e-4
    seed: int = 0
    generated: tuple = ()
    n_basis: int = 2
    n_cross: int = 12
    q_basis: int = 8
    q_coeff: int = 8
    q_mixer: int = 8
    quantized: bool = True
    act_bits: int | None = None
    temperature: float = 3.0
    beta: float = 0.9
    ortho_weight: float = 0.02
    init: str = "l2"            # "l2" | "svd" | "random"
    init_iters: int = 3000
    init_lr: float = 0.02
    eval_train_samples: int = 10240

    def __post_init__(self):
        if self.init not in ("l2", "svd", "random"):
            raise ConfigError(f"init must be l2, svd, or random, got {self.init!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        self.generated = tuple(int(i) for i in self.generated)


@dataclass
class TrainResult:
    model: nn.Sequential
    metrics: list[dict]
    config: TrainConfig
    init_residuals: list[float] = field(default_factory=list)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """The run's fixed shuffle source: PCG64 seeded with (seed, epoch)."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate(model: nn.Sequential, x: np.ndarray, y: np.ndarray,
             batch_size: int = 256) -> float:
    hits = 0
    for idx in _batches(x.shape[0], batch_size, np.arange(x.shape[0])):
        logits = model.forward(x[idx], train=False)
        hits += int((logits.argmax(axis=1) == y[idx]).sum())
    return hits / x.shape[0]


def _conv_layers(model: nn.Sequential):
    return [l for l in model.layers if isinstance(l, (nn.Conv2d, nn.GeneratedConv2d))]


def initialize_from_teacher(model: nn.Sequential, teacher: nn.Sequential,
                            cfg: TrainConfig, rng: np.random.Generator):
    """Stage 1: fit every generated layer's factors to the matching teacher
    kernel.  Returns the per-layer relative residuals."""
    student_convs = _conv_layers(model)
    teacher_convs = _conv_layers(teacher)
    if len(student_convs) != len(teacher_convs):
        raise ConfigError(
            f"teacher has {len(teacher_convs)} conv layers, student has "
            f"{len(student_convs)}; architectures must match"
        )
    residuals = []
    for s_layer, t_layer in zip(student_convs, teacher_convs):
        if not isinstance(s_layer, nn.GeneratedConv2d):
            continue
        if isinstance(t_layer, nn.GeneratedConv2d):
            raise ConfigError("teacher must be a dense network")
        target = t_layer.weight.value
        plan = s_layer.factors.plan
        if cfg.init == "svd":
            factors, residual = svd_init(target, plan)
        else:
            factors, residual = l2_project_init(
                target, plan, rng, iters=cfg.init_iters, lr=cfg.init_lr
            )
        for name in ("basis", "coeff", "mixer"):
            new = getattr(factors, name)
            if new is not None:
                getattr(s_layer.factors, name)[...] = new
        residuals.append(residual)
    return residuals


def train(
    cfg: TrainConfig,
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    teacher: nn.Sequential | None = None,
    verbose: bool = False,
) -> TrainResult:
    """Run the full two-stage schedule and return the model plus metrics."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    model = nn.build_network(
        cfg.arch, cfg.in_channels, cfg.in_size, rng,
        generated=cfg.generated, n_basis=cfg.n_basis, n_cross=cfg.n_cross,
        q_basis=cfg.q_basis, q_coeff=cfg.q_coeff, q_mixer=cfg.q_mixer,
        act_bits=cfg.act_bits, quantized=cfg.quantized,
    )
    init_residuals = []
    if cfg.generated and teacher is not None and cfg.init != "random":
        init_residuals = initialize_from_teacher(model, teacher, cfg, rng)
    opt = RAdam(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen_layers = model.generated_layers()
    n = train_x.shape[0]
    eval_n = min(cfg.eval_train_samples, n)
    metrics = []
    for epoch in range(cfg.epochs):
        order = epoch_rng(cfg.seed, epoch).permutation(n)
        kd_sum, ort_sum, batches = 0.0, 0.0, 0
        for idx in _batches(n, cfg.batch_size, order):
            xb, yb = train_x[idx], train_y[idx]
            t_logits = None
            if teacher is not None:
                t_logits = teacher.forward(xb, train=False)
            logits = model.forward(xb, train=True)
            loss, d_logits = kd_loss(
                logits, yb, teacher_logits=t_logits,
                temperature=cfg.temperature, beta=cfg.beta,
            )
            model.zero_grad()
            model.backward(d_logits)
            ort_value = 0.0
            for layer in gen_layers:
                value, grads = ortho_reg(layer.factors)
                ort_value += value
                if cfg.ortho_weight:
                    for p in layer.params():
                        p.grad += cfg.ortho_weight * getattr(grads, p.name)
            opt.step()
            kd_sum += loss
            ort_sum += ort_value
            batches += 1
        lr_used = opt.lr
        opt.lr *= cfg.lr_decay
        row = {
            "epoch": epoch,
            "lr": lr_used,
            "loss_kd": kd_sum / batches,
            "loss_ort": ort_sum / batches,
            "train_acc": evaluate(model, train_x[:eval_n], train_y[:eval_n]),
            "test_acc": evaluate(model, test_x, test_y),
        }
        metrics.append(row)
        if verbose:
            print(
                f"epoch {epoch:3d}  lr {lr_used:.5f}  kd {row['loss_kd']:.4f}  "
                f"ort {row['loss_ort']:.4f}  train {row['train_acc']:.4f}  "
                f"test {row['test_acc']:.4f}",
                flush=True,
            )
    return TrainResult(model=model, metrics=metrics, config=cfg,
                       init_residuals=init_residuals)


def write_metrics(path, rows: list[dict]) -> None:
    """Write the per-epoch metric log as CSV, atomically."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in METRIC_COLUMNS})
    _atomic_write(path, buf.getvalue().encode())


def _atomic_write(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model: nn.Sequential, cfg: TrainConfig,
                    epoch: int, opt: RAdam | None = None) -> None:
    """Versioned npz checkpoint: params, BN buffers, factor containers as
    raw bytes, and (optionally) optimizer moments."""
    arrays = {}
    for name, p in model.named_params():
        arrays[f"p/{name}"] = p.value
    for i, layer in enumerate(model.layers):
        if isinstance(layer, nn.BatchNorm2d):
            arrays[f"b/{i}.running_mean"] = layer.running_mean
            arrays[f"b/{i}.running_var"] = layer.running_var
        if isinstance(layer, nn.GeneratedConv2d):
            blob = factorfile.factors_to_bytes(layer.factors)
            arrays[f"f/{i}"] = np.frombuffer(blob, dtype=np.uint8)
    if opt is not None:
        for p, m, v in zip(opt.params, opt._m, opt._v):
            arrays[f"om/{p.name}"] = m
            arrays[f"ov/{p.name}"] = v
        arrays["ostep"] = np.array([opt._step])
    meta = {
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "config": asdict(cfg),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write(path, buf.getvalue())


def load_checkpoint(path):
    """Rebuild (model, config, epoch) from a checkpoint file."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(bytes(arrays.pop("meta").tobytes()).decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint version {meta.get('version')!r}"
        )
    cfg_dict = dict(meta["config"])
    cfg_dict["generated"] = tuple(cfg_dict.get("generated", ()))
    cfg = TrainConfig(**cfg_dict)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    model = nn.build_network(
        cfg.arch, cfg.in_channels, cfg.in_size, rng,
        generated=cfg.generated, n_basis=cfg.n_basis, n_cross=cfg.n_cross,
        q_basis=cfg.q_basis, q_coeff=cfg.q_coeff, q_mixer=cfg.q_mixer,
        act_bits=cfg.act_bits, quantized=cfg.quantized,
    )
    for name, p in model.named_params():
        key = f"p/{name}"
        if key not in arrays:
            raise ConfigError(f"checkpoint is missing parameter {name}")
        if arrays[key].shape != p.value.shape:
            raise ShapeError(
                f"checkpoint parameter {name} has shape {arrays[key].shape}, "
                f"model expects {p.value.shape}"
            )
        p.value[...] = arrays[key]
    for i, layer in enumerate(model.layers):
        if isinstance(layer, nn.BatchNorm2d):
            layer.running_mean[...] = arrays[f"b/{i}.running_mean"]
            layer.running_var[...] = arrays[f"b/{i}.running_var"]
        if isinstance(layer, nn.GeneratedConv2d):
            loaded = factorfile.factors_from_bytes(arrays[f"f/{i}"].tobytes())
            for name in ("basis", "coeff", "mixer"):
                new = getattr(loaded, name)
                if new is not None:
                    getattr(layer.factors, name)[...] = new
    return model, cfg, meta["epoch"]
