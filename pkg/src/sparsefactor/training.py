"""Two-stage per-batch training loop, optimizer, and alignment diagnostics.

Per batch, in order: summarize history, snapshot the encoder, refine the
latent for K proximal steps against the true targets, update the
summarizer+decoder on the refined latent (stage 1), then update the
encoder toward the same cached refined latent (stage 2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .datasets import SampleSet
from .errors import DegenerateTestError, InvalidArgumentError, NumericalFailureError
from .inference import EnergyParams, soft_threshold

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    beta_match: float = 5.0
    gamma_contrast: float = 0.0
    learning_rate: float = 1e-4
    grad_clip_norm: float = 1.0
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    lr_schedule: str = "cosine"
    energy_params: EnergyParams = field(default_factory=EnergyParams)
    seed: int = 0
    use_dropout: bool = True
    auto_step: bool = False  # refinement step 1/(L_g + 2 mu), linearized only
    warm_start: bool = False  # dictionary-initialized decoder + pretrained encoder
    # encoder pretraining epochs inside the warm start; 0 leaves the encoder
    # at random init so the two-stage loop must align it through refinement
    warm_start_pretrain_epochs: int = 40
    # summarizer/decoder pretraining epochs against the dictionary codes;
    # fits the history-context head to the part of the targets the sparse
    # dictionary cannot carry (the code path alone leaves it untouched)
    warm_start_stage1_epochs: int = 0
    stage3_finetune: bool = False
    stage3_epochs: int = 5

    def __post_init__(self):
        if self.beta_match < 0 or self.gamma_contrast < 0:
            raise InvalidArgumentError("beta_match and gamma_contrast must be nonnegative")
        if self.grad_clip_norm <= 0:
            raise InvalidArgumentError("grad_clip_norm must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise InvalidArgumentError("lr_schedule must be 'constant' or 'cosine'")


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    stopping_epoch: int | None = None
    best_val_rmse: float = math.inf

    def history(self, key: str) -> list[float]:
        return [e[key] for e in self.epochs]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def clip_by_global_norm(grad: np.ndarray, clip_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > clip_norm:
        return grad * (clip_norm / norm)
    return grad


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              learning_rate: float, grad_clip_norm: float | None = None) -> np.ndarray:
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-8) after global-norm clipping."""
    g = grads if grad_clip_norm is None else clip_by_global_norm(grads, grad_clip_norm)
    state.t += 1
    state.m = ADAM_BETA1 * state.m + (1 - ADAM_BETA1) * g
    state.v = ADAM_BETA2 * state.v + (1 - ADAM_BETA2) * g * g
    m_hat = state.m / (1 - ADAM_BETA1 ** state.t)
    v_hat = state.v / (1 - ADAM_BETA2 ** state.t)
    return params - learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


class GroupOptimizer:
    """Adam over one named parameter subset of a bundle."""

    def __init__(self, bundle: M.ModelBundle, names: list[str], config: TrainConfig):
        self.names = names
        self.config = config
        size = M.flatten_params(bundle, names).size
        self.state = AdamState(m=np.zeros(size), v=np.zeros(size))

    def step(self, bundle: M.ModelBundle, grads: dict[str, np.ndarray], lr: float):
        flat_p = M.flatten_params(bundle, self.names)
        flat_g = np.concatenate([
            np.ravel(np.broadcast_to(grads.get(n, 0.0), bundle.params[n].shape))
            for n in self.names
        ])
        new_p = adam_step(flat_p, flat_g, self.state, lr, self.config.grad_clip_norm)
        M.set_flat_params(bundle, new_p, self.names)


def schedule_lr(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "constant":
        return config.learning_rate
    # cosine decay over max_epochs, per-epoch granularity
    frac = min(epoch / max(config.max_epochs - 1, 1), 1.0)
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# batched refinement


def refine_batch(y: np.ndarray, h: np.ndarray, anchor: np.ndarray,
                 bundle: M.ModelBundle, params: EnergyParams,
                 return_energies: bool = False):
    """Vectorized K-step proximal refinement over a batch (anchor held fixed)."""
    y = np.atleast_2d(np.asarray(y, float))
    h = np.atleast_2d(np.asarray(h, float))
    anchor = np.atleast_2d(np.asarray(anchor, float))
    alpha, theta = params.step_size, params.step_size * params.lambda_l1
    z = anchor.copy()
    energies = [_batch_energy(y, h, z, anchor, bundle, params)] if return_energies else None
    for k in range(params.num_steps):
        grad_c = M.dec_grad_z(z, h, y, bundle)
        g = grad_c + 2.0 * params.mu_prox * (z - anchor)
        if not np.all(np.isfinite(g)):
            raise NumericalFailureError(f"non-finite refinement gradient at step {k}", iterate=k)
        z = soft_threshold(z - alpha * g, theta)
        if return_energies:
            energies.append(_batch_energy(y, h, z, anchor, bundle, params))
    if return_energies:
        return z, np.array(energies)  # (K+1, B)
    return z


def _batch_energy(y, h, z, anchor, bundle, params):
    out = M.dec_forward_values(z, h, bundle)
    resid = y - np.atleast_2d(out)
    c = np.sum(resid * resid, axis=1)
    l1 = params.lambda_l1 * np.sum(np.abs(z), axis=1)
    dz = z - anchor
    return c + l1 + params.mu_prox * np.sum(dz * dz, axis=1)


# ---------------------------------------------------------------------------
# diagnostics


def compute_alignment(z_star_set: np.ndarray, z_hat_set: np.ndarray) -> tuple[float, float]:
    """Pooled R^2 and mean per-sample cosine between refined and amortized latents."""
    zs = np.atleast_2d(np.asarray(z_star_set, float))
    zh = np.atleast_2d(np.asarray(z_hat_set, float))
    if zs.shape != zh.shape:
        raise InvalidArgumentError("latent sets must share shape")
    center = zs - zs.mean(axis=0, keepdims=True)
    denom = float(np.sum(center * center))
    if denom == 0.0:
        raise DegenerateTestError("zero-variance refined latent set; R^2 undefined")
    resid = zs - zh
    r_squared = 1.0 - float(np.sum(resid * resid)) / denom
    cosines = []
    for a, b in zip(zs, zh):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            cosines.append(1.0 if np.array_equal(a, b) else 0.0)
        else:
            cosines.append(float(a @ b / (na * nb)))
    return r_squared, float(np.mean(cosines))


def contrastive_loss(batch: SampleSet, bundle: M.ModelBundle, config: TrainConfig,
                     rng: np.random.Generator | None = None) -> float:
    loss, _, _ = _contrastive_core(batch.features, batch.masks, batch.targets,
                                   bundle, config, rng or np.random.default_rng(config.seed),
                                   want_grads=False)
    return loss


def _nonidentity_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise InvalidArgumentError("contrastive shuffle needs batch size >= 2")
    while True:
        perm = rng.permutation(n)
        if not np.array_equal(perm, np.arange(n)):
            return perm


def _contrastive_core(features, masks, targets, bundle, config, rng, want_grads=True):
    """Mean squared cosine between encoder latents and shuffled-target refinements."""
    perm = _nonidentity_permutation(targets.shape[0], rng)
    z_hat, cache = M.enc_forward_batch(features, masks, bundle)
    h, _ = M.pred_forward_batch(features, masks, bundle)
    z_shuff = refine_batch(targets[perm], h, z_hat, bundle, config.energy_params)
    b = z_hat.shape[0]
    cos_vals = np.zeros(b)
    dz = np.zeros_like(z_hat)
    for j in range(b):
        a, c = z_hat[j], z_shuff[j]
        na, nc = np.linalg.norm(a), np.linalg.norm(c)
        if na == 0.0 or nc == 0.0:
            continue
        cos = float(a @ c / (na * nc))
        cos_vals[j] = cos
        if want_grads:
            dcos_da = c / (na * nc) - cos * a / (na * na)
            dz[j] = 2.0 * cos * dcos_da / b
    loss = float(np.mean(cos_vals ** 2))
    grads = M.enc_backward(config.gamma_contrast * dz, cache, bundle) if want_grads else {}
    return loss, grads, perm


# ---------------------------------------------------------------------------
# forward paths for evaluation


def deployed_forward(samples: SampleSet, bundle: M.ModelBundle) -> np.ndarray:
    """Test-time path: Dec(Enc(X), Pred(X)); deterministic, dropout-free."""
    z_hat, _ = M.enc_forward_batch(samples.features, samples.masks, bundle)
    h, _ = M.pred_forward_batch(samples.features, samples.masks, bundle)
    return np.atleast_2d(M.dec_forward_values(z_hat, h, bundle))


def refined_forward(samples: SampleSet, bundle: M.ModelBundle,
                    params: EnergyParams) -> tuple[np.ndarray, np.ndarray]:
    """Oracle path: refine against true targets, then decode; training diagnostic."""
    z_hat, _ = M.enc_forward_batch(samples.features, samples.masks, bundle)
    h, _ = M.pred_forward_batch(samples.features, samples.masks, bundle)
    z_star = refine_batch(samples.targets, h, z_hat, bundle, params)
    return np.atleast_2d(M.dec_forward_values(z_star, h, bundle)), z_star


def deployed_rmse(samples: SampleSet, bundle: M.ModelBundle) -> float:
    pred = deployed_forward(samples, bundle)
    return float(np.sqrt(np.mean((pred - samples.targets) ** 2)))


# ---------------------------------------------------------------------------
# warm start: dictionary initialization and encoder pretraining


def learn_dictionary(targets: np.ndarray, num_atoms: int, lambda_l1: float = 4.0,
                     iters: int = 60, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sparse dictionary fit to centered targets by lasso alternation.

    Codes are lasso solutions at the energy penalty ``lambda_l1`` (the
    residual term here is an unscaled sum of squares, so the sklearn-scale
    penalty is lambda_l1/2). The dictionary update is a ridge-stabilized
    least squares followed by atom renormalization; dead or near-duplicate
    atoms are replaced with the worst-reconstructed residual direction so
    every atom stays in use.

    Returns (target_mean, atoms, codes) with atoms of shape
    (num_atoms, num_horizons) and codes aligned with the input rows.
    """
    from sklearn.decomposition import sparse_encode

    y = np.asarray(targets, float)
    mean = y.mean(axis=0)
    yc = y - mean
    n = yc.shape[1]
    m = num_atoms
    alpha = lambda_l1 / 2.0

    if alpha <= 0:
        # no sparsity penalty: principal-component dictionary, dense codes
        _, _, vt = np.linalg.svd(yc, full_matrices=False)
        atoms = vt[:m]
        if atoms.shape[0] < m:
            atoms = np.vstack([atoms,
                               np.zeros((m - atoms.shape[0], n))])
            atoms[len(vt):] = np.eye(n)[: m - len(vt)]
        return mean, atoms, yc @ atoms.T

    def encode(targets_c, dictionary):
        return sparse_encode(targets_c, dictionary, algorithm="lasso_cd",
                             alpha=alpha)

    rng = np.random.default_rng(seed)
    atoms = rng.standard_normal((m, n))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    for _ in range(iters):
        codes = encode(yc, atoms)
        atoms = np.linalg.solve(codes.T @ codes + 1e-6 * np.eye(m), codes.T @ yc)
        norms = np.linalg.norm(atoms, axis=1)
        resid = yc - codes @ atoms
        resid_norm = np.linalg.norm(resid, axis=1)
        unit = atoms / np.maximum(norms[:, None], 1e-12)
        gram = np.abs(unit @ unit.T) - np.eye(m)
        usage = np.abs(codes).sum(axis=0)
        for k in range(m):
            dup = gram[k].max() > 0.92 and usage[k] <= usage[int(np.argmax(gram[k]))]
            if norms[k] < 1e-6 or usage[k] < 1e-8 or dup:
                j = int(np.argmax(resid_norm))
                atoms[k] = resid[j] / max(np.linalg.norm(resid[j]), 1e-12)
                resid_norm[j] = 0.0
        atoms /= np.maximum(np.linalg.norm(atoms, axis=1, keepdims=True), 1e-12)
    codes = encode(yc, atoms)
    return mean, atoms, codes


def pretrain_encoder(train: SampleSet, codes: np.ndarray, bundle: M.ModelBundle,
                     config: TrainConfig, epochs: int = 40,
                     learning_rate: float = 1e-3) -> list[float]:
    """Fit the encoder to fixed target codes with the stage-2 loss."""
    codes = np.asarray(codes, float)
    if codes.shape != (len(train), bundle.config.latent_dim):
        raise InvalidArgumentError("codes must be (num_samples, latent_dim)")
    opt = GroupOptimizer(bundle, bundle.param_subset("enc"), config)
    rng = np.random.default_rng(config.seed + 17)
    n = len(train)
    bs = min(config.batch_size, n)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total, n_batches = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = M.stage2_loss_and_grads(
                train.features[idx], train.masks[idx], codes[idx], bundle,
                beta=config.beta_match)
            if not math.isfinite(loss):
                raise NumericalFailureError("non-finite encoder pretraining loss")
            opt.step(bundle, grads, learning_rate)
            total += loss
            n_batches += 1
        losses.append(total / n_batches)
    return losses


def pretrain_predictor(train: SampleSet, codes: np.ndarray, bundle: M.ModelBundle,
                       config: TrainConfig, epochs: int = 10,
                       learning_rate: float = 1e-3) -> list[float]:
    """Fit summarizer and decoder to (codes, targets) with the stage-1 loss."""
    codes = np.asarray(codes, float)
    if codes.shape != (len(train), bundle.config.latent_dim):
        raise InvalidArgumentError("codes must be (num_samples, latent_dim)")
    opt = GroupOptimizer(bundle, bundle.param_subset(("pred", "dec")), config)
    rng = np.random.default_rng(config.seed + 29)
    n = len(train)
    bs = min(config.batch_size, n)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total, n_batches = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = M.stage1_loss_and_grads(
                train.features[idx], train.masks[idx], codes[idx],
                train.targets[idx], bundle)
            if not math.isfinite(loss):
                raise NumericalFailureError("non-finite predictor pretraining loss")
            opt.step(bundle, grads, learning_rate)
            total += loss
            n_batches += 1
        losses.append(total / n_batches)
    return losses


def warm_start_bundle(splits: dict[str, SampleSet], model_config: M.ModelConfig,
                      config: TrainConfig, dict_iters: int = 60,
                      pretrain_epochs: int | None = None) -> M.ModelBundle:
    """Bundle whose decoder starts at a sparse dictionary fit of the targets.

    Only the linearized decoder exposes an explicit latent path matrix, so
    the dictionary can be planted directly; the context head starts at the
    constant target mean, optionally followed by a stage-1 pretrain that
    fits the summarizer and context head to what the dictionary left
    unexplained. The encoder is pretrained against the dictionary codes so
    the refinement anchor is informative from the first epoch.
    """
    if model_config.decoder_kind != "linearized":
        raise InvalidArgumentError("dictionary warm start requires the linearized decoder")
    train = splits.get("train")
    if train is None or len(train) == 0:
        raise InvalidArgumentError("warm start needs a nonempty train split")
    mean, atoms, codes = learn_dictionary(
        train.targets, model_config.latent_dim,
        lambda_l1=config.energy_params.lambda_l1,
        iters=dict_iters, seed=config.seed)
    bundle = M.init_bundle(model_config, rng_seed=config.seed)
    bundle.params["dec_Wz"] = atoms.copy()
    bundle.params["dec_f_W3"][:] = 0.0
    bundle.params["dec_f_b3"] = mean.copy()
    if config.warm_start_stage1_epochs > 0:
        pretrain_predictor(train, codes, bundle, config,
                           epochs=config.warm_start_stage1_epochs)
    if pretrain_epochs is None:
        pretrain_epochs = config.warm_start_pretrain_epochs
    if pretrain_epochs > 0:
        pretrain_encoder(train, codes, bundle, config, epochs=pretrain_epochs)
    return bundle


# ---------------------------------------------------------------------------
# the two-stage loop


def effective_energy_params(bundle: M.ModelBundle, config: TrainConfig) -> EnergyParams:
    """Energy params for the current bundle; adaptive step when requested.

    With ``auto_step`` (linearized decoder only) the step is set to the
    guaranteed-descent maximum 1/(2||W||_op^2 + 2 mu), re-estimated as the
    latent path matrix evolves.
    """
    ep = config.energy_params
    if not config.auto_step or bundle.config.decoder_kind != "linearized":
        return ep
    w = bundle.latent_path_matrix
    op = float(np.linalg.norm(w, 2))
    alpha = 1.0 / (2.0 * op * op + 2.0 * ep.mu_prox + 1e-12)
    return EnergyParams(lambda_l1=ep.lambda_l1, mu_prox=ep.mu_prox,
                        step_size=alpha, num_steps=ep.num_steps,
                        convergence_tol=ep.convergence_tol)


def train_two_stage(splits: dict[str, SampleSet], model_config: M.ModelConfig,
                    config: TrainConfig, epoch_callback=None,
                    warm_bundle: M.ModelBundle | None = None,
                    ) -> tuple[M.ModelBundle, TrainReport]:
    """Algorithm: per batch refine -> stage 1 (Pred/Dec) -> stage 2 (Enc).

    Early stopping monitors deployed validation RMSE aggregated over horizons.
    A ``warm_bundle`` (for example from ``warm_start_bundle``) replaces the
    random initialization.
    """
    train, val = splits.get("train"), splits.get("val")
    if train is None or len(train) == 0 or val is None or len(val) == 0:
        raise InvalidArgumentError("train and val splits must be nonempty")

    ss = np.random.SeedSequence(config.seed)
    shuffle_rng, dropout_rng, contrast_rng, init_ss = [
        np.random.default_rng(s) for s in ss.spawn(4)]
    if warm_bundle is not None:
        if warm_bundle.config != model_config:
            raise InvalidArgumentError("warm bundle config does not match model_config")
        bundle = warm_bundle.copy()
    elif config.warm_start:
        bundle = warm_start_bundle(splits, model_config, config)
    else:
        bundle = M.init_bundle(model_config, rng_seed=config.seed)
    opt1 = GroupOptimizer(bundle, bundle.param_subset(("pred", "dec")), config)
    opt2 = GroupOptimizer(bundle, bundle.param_subset("enc"), config)
    del init_ss

    report = TrainReport()
    best_bundle = bundle.copy()
    # the starting point competes too, so a warm start that fine-tuning
    # only degrades is never lost
    best_rmse = deployed_rmse(val, bundle)
    best_epoch = -1
    n = len(train)
    bs = min(config.batch_size, n)

    for epoch in range(config.max_epochs):
        lr = schedule_lr(config, epoch)
        order = shuffle_rng.permutation(n)
        epoch_pred_loss = 0.0
        epoch_match_loss = 0.0
        epoch_contrast_loss = 0.0
        n_batches = 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            feats, masks = train.features[idx], train.masks[idx]
            y = train.targets[idx]

            drop = dropout_rng if (config.use_dropout and model_config.dropout_rate > 0) else None
            h, rec_cache = M.pred_forward_batch(feats, masks, bundle, dropout_rng=drop)
            z_bar, _ = M.enc_forward_batch(feats, masks, bundle)  # frozen snapshot
            z_star = refine_batch(y, h, z_bar, bundle,
                                  effective_energy_params(bundle, config))

            # stage 1: Pred/Dec on the refined latent (pre-update h cache reused)
            loss1, grads1 = M.stage1_from_cache(h, rec_cache, z_star, y, bundle)
            if not math.isfinite(loss1):
                raise NumericalFailureError(
                    f"non-finite stage-1 loss at epoch {epoch}, batch {start // bs}")
            opt1.step(bundle, grads1, lr)

            # stage 2: Enc toward the SAME cached z_star (not recomputed)
            loss2, grads2 = M.stage2_loss_and_grads(feats, masks, z_star, bundle,
                                                    beta=config.beta_match)
            if config.gamma_contrast > 0 and len(idx) >= 2:
                closs, cgrads, _ = _contrastive_core(feats, masks, y, bundle, config,
                                                     contrast_rng)
                for k, v in cgrads.items():
                    grads2[k] = grads2.get(k, 0.0) + v
                epoch_contrast_loss += closs
            if not math.isfinite(loss2):
                raise NumericalFailureError(
                    f"non-finite stage-2 loss at epoch {epoch}, batch {start // bs}")
            opt2.step(bundle, grads2, lr)

            epoch_pred_loss += loss1
            epoch_match_loss += loss2
            n_batches += 1

        val_rmse = deployed_rmse(val, bundle)
        _, z_star_val = refined_forward(val, bundle,
                                        effective_energy_params(bundle, config))
        z_hat_val, _ = M.enc_forward_batch(val.features, val.masks, bundle)
        try:
            r2, cos = compute_alignment(z_star_val, z_hat_val)
        except DegenerateTestError:
            r2, cos = float("nan"), float("nan")
        entry = {
            "epoch": epoch,
            "lr": lr,
            "train_pred_loss": epoch_pred_loss / n_batches,
            "train_match_loss": epoch_match_loss / n_batches,
            "val_rmse": val_rmse,
            "alignment_r2": r2,
            "alignment_cosine": cos,
        }
        if config.gamma_contrast > 0:
            entry["train_contrast_loss"] = epoch_contrast_loss / n_batches
        report.epochs.append(entry)
        if epoch_callback is not None:
            epoch_callback(epoch, bundle, report)

        if val_rmse < best_rmse - 1e-12:
            best_rmse = val_rmse
            best_bundle = bundle.copy()
            best_epoch = epoch
        elif epoch - best_epoch >= config.patience:
            break

    report.stopping_epoch = best_epoch
    report.best_val_rmse = best_rmse
    bundle = best_bundle

    if config.stage3_finetune:
        _stage3_finetune(splits, bundle, config)
    return bundle, report


def _stage3_finetune(splits, bundle, config):
    """Optional deployed-path fine-tuning of Pred/Dec (off by default)."""
    train = splits["train"]
    opt = GroupOptimizer(bundle, bundle.param_subset(("pred", "dec")), config)
    rng = np.random.default_rng(config.seed + 1)
    n = len(train)
    bs = min(config.batch_size, n)
    for epoch in range(config.stage3_epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            feats, masks, y = train.features[idx], train.masks[idx], train.targets[idx]
            z_hat, _ = M.enc_forward_batch(feats, masks, bundle)
            _, grads = M.stage1_loss_and_grads(feats, masks, z_hat, y, bundle)
            opt.step(bundle, grads, config.learning_rate)
