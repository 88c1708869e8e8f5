"""Central finite-difference oracle, kept free of autograd.

The default step of 1e-7 is small enough that perturbations rarely cross a
ReLU or max-pool kink, which at 1e-6 already skews the estimate on 32x32
inputs, while float64 round-off stays far below the tolerances used.
"""

import torch


@torch.no_grad()
def numeric_grads(fn, tensors, eps=1e-7):
    grads = []
    for t in tensors:
        g = torch.zeros_like(t)
        flat, gflat = t.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grads(fn, tensors):
    for t in tensors:
        t.grad = None
    fn().backward()
    return [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
            for t in tensors]


def relative_error(fn, tensors, eps=1e-7):
    """||analytic - numeric|| / max(||analytic||, ||numeric||) over all tensors."""
    a = torch.cat([g.flatten() for g in analytic_grads(fn, tensors)])
    n = torch.cat([g.flatten() for g in numeric_grads(fn, tensors, eps)])
    scale = max(a.norm().item(), n.norm().item(), 1e-12)
    return (a - n).norm().item() / scale
