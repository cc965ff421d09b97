"""Independent straight-line reference implementations used as test oracles.

These deliberately avoid the batched helpers of ``simaug_lab.augment``: every
sample and every candidate view is processed on its own with plain loops.
"""

import numpy as np

from simaug_lab import tensor as nd
from simaug_lab.tensor import Tensor


def one_hot_cells(grid, pixels):
    cells = grid.cell_index(pixels)
    out = np.zeros((len(cells), grid.n_cells))
    out[np.arange(len(cells)), cells] = 1.0
    return out


def cross_entropy(probs, labels, T):
    return float(-np.sum(labels * np.log(np.maximum(probs, 1e-12))) / T)


def model_probs(model, V, obs, labels):
    with nd.no_grad():
        return model.coarse_only(V[None].astype(model.dtype), obs[None].astype(model.dtype),
                                 labels[None].astype(model.dtype)).data[0]


def view_loss(model, V, obs, labels):
    return cross_entropy(model_probs(model, V, obs, labels), labels, model.config.T)


def hardest_view(model, V, obs, candidate_labels):
    losses = [view_loss(model, V, obs, lab) for lab in candidate_labels]
    best = 0
    for j in range(1, len(losses)):
        if losses[j] > losses[best]:
            best = j
    return best, losses


def feature_gradient(model, V, obs, labels):
    x = Tensor(V.astype(model.dtype), requires_grad=True)
    with model.frozen():
        probs = model.coarse_only(x[None], obs[None].astype(model.dtype), labels[None].astype(model.dtype))
        logp = nd.log(probs, eps=1e-12)
        loss = nd.sum(logp * Tensor(labels[None].astype(model.dtype))) * (-1.0 / model.config.T)
        (g,) = nd.gradients(loss, [x])
    return g


def scripted_simaug(model, records, anchors, grid, config, seed, parts=None):
    """Hardest view, targeted step and mixing, one sample at a time.

    Returns the mean classification loss of the mixed batch and the mixed
    samples as ``(V_aug, obs_aug, labels_aug, lam, view)`` tuples. When
    ``parts`` is a list, the unmixed endpoints of every sample are appended
    to it as ``(V_adv, V_sel, obs, obs_sel, labels, labels_sel)``.
    """
    h = records[0].h
    bound = 0.0 if config.no_noise else config.delta
    out = []
    for i, (rec, a) in enumerate(zip(records, anchors)):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        view = rec.views[a]
        V = view.features[:h].astype(np.float64)
        cells = one_hot_cells(grid, view.pixels)
        obs, labels = cells[:h], cells[h:]
        cand = [j for j in range(len(rec.views)) if j != a]
        cand_cells = [one_hot_cells(grid, rec.views[j].pixels) for j in cand]

        noise1 = rng.uniform(-bound, bound, size=V.shape).astype(model.dtype) if bound > 0 else np.zeros(V.shape)
        if config.random_view:
            pick = int(rng.integers(len(cand)))
        else:
            pick, _ = hardest_view(model, V + noise1, obs, [c[h:] for c in cand_cells])
        if config.reuse_noise:
            noise2 = noise1
        elif bound > 0:
            noise2 = rng.uniform(-bound, bound, size=V.shape).astype(model.dtype)
        else:
            noise2 = np.zeros(V.shape)
        target = cand_cells[pick][h:]
        if config.no_attack or config.eps == 0:
            V_adv = V
        else:
            g = feature_gradient(model, V + noise2, obs, target)
            V_adv = V - config.eps * np.sign(g)
        lam = rng.beta(config.alpha, config.alpha)
        V_sel = rec.views[cand[pick]].features[:h].astype(np.float64)
        V_aug = lam * V_adv + (1 - lam) * V_sel
        obs_aug = lam * obs + (1 - lam) * cand_cells[pick][:h]
        lab_aug = lam * labels + (1 - lam) * target
        out.append((V_aug, obs_aug, lab_aug, float(lam), cand[pick]))
        if parts is not None:
            parts.append((V_adv, V_sel, obs, cand_cells[pick][:h], labels, target))
    losses = [view_loss(model, s[0], s[1], s[2]) for s in out]
    return float(np.mean(losses)), out


def naive_min_ade(truths, preds):
    total = 0.0
    n, k, p, _ = preds.shape
    for i in range(n):
        best = np.inf
        for j in range(k):
            s = 0.0
            for t in range(p):
                dx = preds[i, j, t, 0] - truths[i, t, 0]
                dy = preds[i, j, t, 1] - truths[i, t, 1]
                s += (dx * dx + dy * dy) ** 0.5
            best = min(best, s)
        total += best
    return total / (n * p)


def naive_min_fde(truths, preds):
    n, k, _, _ = preds.shape
    total = 0.0
    for i in range(n):
        best = np.inf
        for j in range(k):
            dx = preds[i, j, -1, 0] - truths[i, -1, 0]
            dy = preds[i, j, -1, 1] - truths[i, -1, 1]
            best = min(best, (dx * dx + dy * dy) ** 0.5)
        total += best
    return total / n


def naive_grid_acc(dists, cells):
    hits = count = 0
    for i in range(len(cells)):
        for t in range(len(cells[i])):
            row = list(dists[i][t])
            best = 0
            for c in range(1, len(row)):
                if row[c] > row[best]:
                    best = c
            hits += best == cells[i][t]
            count += 1
    return hits / count


def random_metric_instance(rng, n=None, k=None, p=None, hw=72):
    """Truths ``(N, P, 2)``, predictions ``(N, K, P, 2)``, distributions and true cells."""
    n = n or int(rng.integers(1, 17))
    k = k or int(rng.integers(1, 21))
    p = p or int(rng.integers(1, 13))
    truths = rng.uniform(0, 480, size=(n, p, 2))
    preds = truths[:, None] + rng.normal(scale=30.0, size=(n, k, p, 2))
    dists = rng.dirichlet(np.ones(hw), size=(n, p))
    cells = np.where(rng.random((n, p)) < 0.5, dists.argmax(-1), rng.integers(hw, size=(n, p)))
    return truths, preds, dists, cells
