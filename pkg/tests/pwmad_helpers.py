import numpy as np
import torch

from morphmad import pwmad
from morphmad.pwmad import PwMadOutput

MINI = dict(input_size=8, block_config=(1,), growth_rate=4, num_init_features=4, bn_size=2)


def loss_reference(pm, score, y, lam):
    """Joint loss from independent numpy BCE terms."""
    pm, score, y = (np.asarray(v, dtype=np.float64) for v in (pm, score, y))
    l_pw = np.array([pwmad.bce(np.full(m.shape, t), m).mean() for m, t in zip(pm, y)])
    l_b = np.asarray(pwmad.bce(y, score))
    return float(np.mean(lam * l_pw + (1 - lam) * l_b)), float(l_pw.mean()), float(l_b.mean())


def random_loss_case(rng):
    n = int(rng.integers(1, 6))
    m = int(rng.integers(1, 15))
    pm = rng.uniform(1e-4, 1 - 1e-4, (n, m, m))
    score = rng.uniform(1e-4, 1 - 1e-4, n)
    y = rng.integers(0, 2, n).astype(np.float64)
    return pm, score, y


def loss_contract(n_cases=1000, seed=0):
    """Returns (max deviation at lam=0.5, whether both boundary cases were exact)."""
    rng = np.random.default_rng(seed)
    worst, exact = 0.0, True
    for _ in range(n_cases):
        pm, score, y = random_loss_case(rng)
        out = PwMadOutput(torch.from_numpy(pm), torch.from_numpy(score))
        target = torch.from_numpy(y)[:, None, None].expand(pm.shape)
        got = float(pwmad.overall_loss(out, target, torch.from_numpy(y), 0.5))
        want, l_pw, l_b = loss_reference(pm, score, y, 0.5)
        worst = max(worst, abs(got - want), abs(got - (0.5 * l_pw + 0.5 * l_b)))
        # boundaries: the dropped term must not leak, whatever its inputs
        other = PwMadOutput(torch.from_numpy(rng.uniform(0.01, 0.99, pm.shape)), out.binary_score)
        only_b = pwmad.overall_loss(out, target, torch.from_numpy(y), 0.0)
        only_b2 = pwmad.overall_loss(other, target, torch.from_numpy(y), 0.0)
        shifted = PwMadOutput(out.pixel_map, torch.from_numpy(rng.uniform(0.01, 0.99, score.shape)))
        only_pw = pwmad.overall_loss(out, target, torch.from_numpy(y), 1.0)
        only_pw2 = pwmad.overall_loss(shifted, target, torch.from_numpy(y), 1.0)
        exact &= bool(only_b == only_b2) and bool(only_pw == only_pw2)
        exact &= abs(float(only_b) - l_b) < 1e-12 and abs(float(only_pw) - l_pw) < 1e-12
    return worst, exact


def gradient_check(seed=0, h=1e-6, tol=1e-4):
    """Fraction of scalar parameters whose autograd gradient matches a central
    finite difference within ``tol`` relative error (float64 miniature)."""
    model = pwmad.build_model(pwmad.PwMadConfig(**MINI), seed=seed).double()
    model.train()
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(4, 3, 8, 8, generator=g, dtype=torch.float64)
    y = torch.tensor([1, 0, 1, 0])
    # perturb BN affine params so they carry nontrivial gradients too
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=torch.float64))

    def loss():
        return model.compute_loss(model(x), y)

    model.zero_grad()
    loss().backward()
    ok = total = 0
    with torch.no_grad():
        for p in model.parameters():
            flat = p.view(-1)
            analytic = p.grad.view(-1).clone()
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                numeric = (up - down) / (2 * h)
                a = analytic[i].item()
                denom = max(abs(a), abs(numeric))
                rel = abs(a - numeric) / denom if denom > 1e-10 else 0.0
                ok += rel <= tol
                total += 1
    return ok / total, total
