"""Quick finite-difference sanity check for the hand-written gradients."""

import numpy as np

from sparsefactor import model as M


def fd_grad(loss_fn, bundle, names, eps=1e-6):
    flat = M.flatten_params(bundle, names)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        for sgn in (1, -1):
            pert = flat.copy()
            pert[i] += sgn * eps
            M.set_flat_params(bundle, pert, names)
            g[i] += sgn * loss_fn()
    M.set_flat_params(bundle, flat, names)
    return g / (2 * eps)


def main():
    rng = np.random.default_rng(0)
    cfg = M.ModelConfig(window=5, num_features=3, latent_dim=3, num_horizons=2,
                        h_dim=4, dec_hidden=(6, 5), decoder_kind="mlp")
    bundle = M.init_bundle(cfg, rng_seed=1)
    B = 3
    feats = rng.standard_normal((B, cfg.window, cfg.num_features))
    masks = (rng.random((B, cfg.window, cfg.num_features)) > 0.3).astype(float)
    y = rng.standard_normal((B, cfg.num_horizons))
    z_star = rng.standard_normal((B, cfg.latent_dim))

    # stage 1
    _, grads = M.stage1_loss_and_grads(feats, masks, z_star, y, bundle)
    names = bundle.param_subset(("pred", "dec"))
    analytic = np.concatenate([np.ravel(grads[n]) for n in names])
    numeric = fd_grad(lambda: M.stage1_loss_and_grads(feats, masks, z_star, y, bundle)[0],
                      bundle, names)
    err = np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8))
    print("stage1 max rel err:", err)

    # stage 2
    _, grads = M.stage2_loss_and_grads(feats, masks, z_star, bundle, beta=2.0)
    names = bundle.param_subset("enc")
    analytic = np.concatenate([np.ravel(grads[n]) for n in names])
    numeric = fd_grad(lambda: 2.0 * M.stage2_loss_and_grads(feats, masks, z_star, bundle)[0],
                      bundle, names)
    err = np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-6))
    print("stage2 max rel err:", err)

    # dec grad z
    h = rng.standard_normal(cfg.h_dim)
    z = rng.standard_normal(cfg.latent_dim)
    yv = rng.standard_normal(cfg.num_horizons)
    g = M.dec_grad_z(z, h, yv, bundle)
    gn = np.zeros_like(z)
    eps = 1e-6
    for i in range(z.size):
        for sgn in (1, -1):
            zp = z.copy(); zp[i] += sgn * eps
            out = M.dec_forward_values(zp, h, bundle)
            gn[i] += sgn * float((yv - out) @ (yv - out))
    gn /= 2 * eps
    print("dec z max rel err:", np.max(np.abs(g - gn) / (np.abs(gn) + 1e-8)))

    # linearized decoder variant
    cfg2 = M.ModelConfig(window=5, num_features=3, latent_dim=3, num_horizons=2,
                         h_dim=4, dec_hidden=(6, 5), decoder_kind="linearized")
    b2 = M.init_bundle(cfg2, rng_seed=2)
    _, grads = M.stage1_loss_and_grads(feats, masks, z_star, y, b2)
    names = b2.param_subset(("pred", "dec"))
    analytic = np.concatenate([np.ravel(grads[n]) for n in names])
    numeric = fd_grad(lambda: M.stage1_loss_and_grads(feats, masks, z_star, y, b2)[0],
                      b2, names)
    print("stage1 linearized max rel err:",
          np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


if __name__ == "__main__":
    main()
