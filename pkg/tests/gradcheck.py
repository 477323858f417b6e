import torch


def central_difference(f, param: torch.Tensor, step: float = 1e-3, entries=None) -> torch.Tensor:
    """Numerical gradient of scalar ``f()`` w.r.t. (selected entries of) ``param``."""
    flat = param.data.view(-1)
    grad = torch.zeros_like(flat)
    idx = range(flat.numel()) if entries is None else entries
    for i in idx:
        orig = flat[i].item()
        flat[i] = orig + step
        plus = f().item()
        flat[i] = orig - step
        minus = f().item()
        flat[i] = orig
        grad[i] = (plus - minus) / (2 * step)
    return grad.view_as(param)


def relative_error(f, params, step: float = 1e-3, max_entries: int | None = None, seed: int = 0):
    """Worst norm-wise relative error between autograd and central differences.

    Each parameter tensor is compared on all entries, or on ``max_entries``
    randomly sampled ones.
    """
    for p in params:
        p.grad = None
    f().backward()
    worst = 0.0
    gen = torch.Generator().manual_seed(seed)
    for p in params:
        n = p.numel()
        entries = None
        if max_entries is not None and n > max_entries:
            entries = torch.randperm(n, generator=gen)[:max_entries].tolist()
        num = central_difference(lambda: f().detach(), p, step, entries)
        ana = p.grad.detach().clone()
        if entries is not None:
            sel = torch.tensor(entries)
            num, ana = num.view(-1)[sel], ana.view(-1)[sel]
        denom = max(num.norm().item(), ana.norm().item(), 1e-12)
        worst = max(worst, (num - ana).norm().item() / denom)
    return worst
