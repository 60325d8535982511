"""Directional finite-difference check of analytic parameter gradients."""
import torch


def directional_gradcheck(model, loss_fn, x, target, n_weights=10, h=1e-6, seed=0):
    """Relative error between the analytic and central-difference derivative.

    ``n_weights`` scalar weights are drawn at random from the model's
    parameters and perturbed together along a random unit direction.
    """
    g = torch.Generator().manual_seed(seed)
    params = [p for p in model.parameters() if p.requires_grad]
    picks = []
    for _ in range(n_weights):
        p = params[int(torch.randint(len(params), (1,), generator=g))]
        picks.append((p, int(torch.randint(p.numel(), (1,), generator=g))))
    v = torch.randn(n_weights, generator=g, dtype=torch.float64)
    v /= v.norm()

    model.zero_grad(set_to_none=True)
    loss_fn(model(x), target).backward()
    analytic = sum(float(p.grad.view(-1)[i]) * float(vk) for (p, i), vk in zip(picks, v))

    def shifted(step):
        with torch.no_grad():
            saved = [p.view(-1)[i].clone() for p, i in picks]
            for (p, i), vk in zip(picks, v):
                p.view(-1)[i] += step * float(vk)
            out = float(loss_fn(model(x), target))
            for (p, i), s in zip(picks, saved):
                p.view(-1)[i] = s
        return out

    numeric = (shifted(h) - shifted(-h)) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), 1e-12)
