"""Central finite-difference gradient checker used by the gradient suites."""
import torch


def numeric_grad(fn, param, eps=1e-6, index=None):
    flat = param.data.view(-1)
    idx = range(flat.numel()) if index is None else index
    out = torch.zeros(len(idx), dtype=torch.float64)
    for j, i in enumerate(idx):
        old = flat[i].item()
        flat[i] = old + eps
        up = fn().item()
        flat[i] = old - eps
        down = fn().item()
        flat[i] = old
        out[j] = (up - down) / (2 * eps)
    return out


def relative_error(analytic, numeric):
    scale = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
    return float((analytic - numeric).norm()) / scale


def check_params(fn, named_params, eps=1e-6, max_coords=None, gen=None):
    """Relative error per parameter name. ``fn`` returns a scalar loss."""
    named = [(n, p) for n, p in named_params if p.requires_grad]
    loss = fn()
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    errors = {}
    with torch.no_grad():
        for (name, p), g in zip(named, grads):
            g = torch.zeros_like(p) if g is None else g
            index = None
            if max_coords is not None and p.numel() > max_coords:
                index = torch.randperm(p.numel(), generator=gen)[:max_coords].tolist()
            num = numeric_grad(fn, p, eps, index)
            ana = g.reshape(-1) if index is None else g.reshape(-1)[index]
            errors[name] = relative_error(ana.double(), num)
    return errors
