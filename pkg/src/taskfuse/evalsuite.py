"""Downstream evaluation: soft clustering, agreement metrics, linear probe.

Clustering follows the self-training scheme: heavy-tailed soft assignments to
learned centers, sharpened into a target distribution that the assignments
are trained to match. Center init is a seeded k-means.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class ClusterReport:
    nmi: float
    ari: float
    recall_at_k: float


@dataclass
class ClusterState:
    centers: np.ndarray
    q: np.ndarray
    nu: float = 1.0


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def dec_soft_assign(z, centers, nu: float = 1.0):
    """Heavy-tailed soft assignment of each embedding to each center.

    q[i, j] is proportional to (1 + ||z_i - c_j||^2 / nu)^(-(nu+1)/2), rows
    normalized. Identical centers split the row evenly.
    """
    if nu <= 0:
        raise ValueError("nu must be positive")
    zt, ct = _to_tensor(z), _to_tensor(centers)
    if ct.shape[0] < 2:
        raise ValueError("need at least 2 centers")
    if zt.shape[-1] != ct.shape[-1]:
        raise ValueError(f"embedding dim {zt.shape[-1]} != center dim {ct.shape[-1]}")
    if not (torch.isfinite(zt.detach()).all() and torch.isfinite(ct.detach()).all()):
        raise ValueError("non-finite inputs")
    d2 = (zt.unsqueeze(-2) - ct.unsqueeze(-3)).pow(2).sum(dim=-1)
    kernel = (1.0 + d2 / nu) ** (-(nu + 1.0) / 2.0)
    q = kernel / kernel.sum(dim=-1, keepdim=True)
    if isinstance(z, torch.Tensor) or isinstance(centers, torch.Tensor):
        return q
    return q.numpy()


def dec_target_distribution(q):
    """Sharpened self-training target: square, deflate by cluster mass, renormalize."""
    qt = _to_tensor(q)
    f = qt.sum(dim=-2, keepdim=True)
    if (f.detach() == 0).any():
        raise ValueError("zero column mass: some cluster received no assignment")
    w = qt * qt / f
    p = w / w.sum(dim=-1, keepdim=True)
    if isinstance(q, torch.Tensor):
        return p
    return p.numpy()


def kmeans_init(z, k: int, seed: int, max_iter: int = 100) -> np.ndarray:
    """Seeded k-means++ start plus standard iterative refinement."""
    pts = np.asarray(z, dtype=np.float64)
    n = pts.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if n == k:
        return pts.copy()
    rng = np.random.default_rng(seed)

    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j:] = centers[0]  # all points identical
            break
        centers[j] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((pts - centers[j]) ** 2).sum(axis=1))

    for _ in range(max_iter):
        dists = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = pts[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
            else:
                new_centers[j] = pts[dists.min(axis=1).argmax()]
        if np.allclose(new_centers, centers, rtol=0.0, atol=1e-12):
            centers = new_centers
            break
        centers = new_centers
    return centers


def recall_at_k(embeddings, labels, k: int = 4) -> float:
    """Fraction of queries whose k nearest neighbors include a same-class item."""
    emb = np.asarray(embeddings, dtype=np.float64)
    lab = np.asarray(labels)
    n = emb.shape[0]
    if k < 1 or k > n - 1:
        raise ValueError(f"k must be in [1, {n - 1}]")
    d2 = ((emb[:, None, :] - emb[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    hits = 0
    for i in range(n):
        nn = np.argpartition(d2[i], k)[:k]
        hits += int((lab[nn] == lab[i]).any())
    return hits / n


def cluster_metrics(true_labels, predicted_labels, embeddings, k: int = 4) -> ClusterReport:
    """Agreement between predicted and true groupings, plus retrieval recall."""
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    if t.shape != p.shape:
        raise ValueError("label arrays must have equal length")
    if len(np.unique(t)) < 2:
        warnings.warn("only one class in the ground truth; reporting nmi=0",
                      stacklevel=2)
        nmi = 0.0
    else:
        nmi = float(normalized_mutual_info_score(t, p))
    ari = float(adjusted_rand_score(t, p))
    rk = recall_at_k(embeddings, t, k)
    return ClusterReport(nmi=nmi, ari=ari, recall_at_k=rk)


def dec_fit(z, k: int, seed: int, iters: int = 200, lr: float = 0.1,
            refresh_interval: int = 10, nu: float = 1.0) -> ClusterState:
    """Refine k-means centers by gradient descent on the self-training objective.

    The sharpened target is refreshed every refresh_interval steps and treated
    as constant in between.
    """
    pts = torch.as_tensor(np.asarray(z, dtype=np.float64))
    centers = torch.tensor(kmeans_init(z, k, seed), requires_grad=True)
    opt = torch.optim.SGD([centers], lr=lr, momentum=0.9)
    target = None
    for step in range(iters):
        q = dec_soft_assign(pts, centers, nu)
        if step % refresh_interval == 0 or target is None:
            target = dec_target_distribution(q).detach()
        loss = (target * torch.log(target.clamp_min(LOG_FLOOR)
                                   / q.clamp_min(LOG_FLOOR))).sum(dim=-1).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        q = dec_soft_assign(pts, centers, nu)
    return ClusterState(centers=centers.detach().numpy(), q=q.numpy(), nu=nu)


def dec_objective(z: torch.Tensor, centers: torch.Tensor, target: torch.Tensor,
                  nu: float = 1.0) -> torch.Tensor:
    """Row-mean KLD from the (fixed) target to the soft assignments."""
    q = dec_soft_assign(z, centers, nu)
    return (target * torch.log(target.clamp_min(LOG_FLOOR)
                               / q.clamp_min(LOG_FLOOR))).sum(dim=-1).mean()


def linear_probe(train_x, train_y, test_x, test_y, seed: int = 0,
                 max_iter: int = 500) -> float:
    """Accuracy of a multinomial linear classifier on frozen features."""
    clf = LogisticRegression(max_iter=max_iter, random_state=seed)
    clf.fit(np.asarray(train_x, dtype=np.float64), np.asarray(train_y))
    return float(clf.score(np.asarray(test_x, dtype=np.float64), np.asarray(test_y)))
