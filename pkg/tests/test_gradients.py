"""Input-level gradient checks of each loss; the parameter-level suite lives in the acceptance tests."""
import torch
import torch.nn as nn
from torch.autograd import gradcheck

from qpm.agfe import all_pairs_global_distance, global_triplet_loss, sg_id_loss
from qpm.isa import ISA, global_id_loss
from qpm.part_branch import pairwise_part_distance, part_id_loss, part_triplet_loss

from gradcheck import check_params

g = torch.Generator().manual_seed(3)
y = torch.tensor([0, 0, 1, 1, 2, 2])


def rand(*shape):
    return torch.randn(*shape, generator=g, dtype=torch.float64, requires_grad=True)


def scores(N, K):
    return torch.empty(N, K, dtype=torch.float64).uniform_(0.1, 0.9, generator=g).requires_grad_()


def test_part_id():
    assert gradcheck(lambda lg: part_id_loss(lg, y), (rand(6, 3, 4),))


def test_part_triplet_into_features_and_scores():
    f, q = rand(6, 3, 5), scores(6, 3)
    assert part_triplet_loss(f, q, y, 0.3).item() > 0
    assert gradcheck(lambda f, q: part_triplet_loss(f, q, y, 0.3), (f, q))


def test_part_distance():
    assert gradcheck(pairwise_part_distance, (rand(4, 3, 5), scores(4, 3), rand(3, 3, 5), scores(3, 3)))


def test_global_id():
    assert gradcheck(lambda lg: global_id_loss(lg, y), (rand(6, 3),))


def test_sg_id():
    cls = nn.Linear(4, 3).double()
    assert gradcheck(lambda gt, q: sg_id_loss(gt, q, y, cls), (rand(6, 3, 4), scores(6, 3)))
    assert gradcheck(lambda gt, q: sg_id_loss(gt, q, y, cls, include_diagonal=False), (rand(6, 3, 4), scores(6, 3)))


def test_global_triplet_and_distance():
    gt, q = rand(6, 3, 4), scores(6, 3)
    assert global_triplet_loss(gt, q, y, 0.3).item() > 0
    assert gradcheck(lambda gt, q: global_triplet_loss(gt, q, y, 0.3), (gt, q))
    assert gradcheck(all_pairs_global_distance, (rand(3, 2, 4), scores(3, 2), rand(2, 2, 4), scores(2, 2)))


def test_isa_parameters_and_scores():
    torch.manual_seed(0)
    isa = ISA(4, 8, 2).double()
    fm, q = rand(3, 4, 4, 2), scores(3, 2)
    assert gradcheck(lambda fm, q: isa(fm, q)["G_tilde"], (fm, q))
    fn = lambda: (isa(fm, q)["G_tilde"] ** 2).sum() + isa(fm, q)["h_hat"].sum()
    assert max(check_params(fn, isa.named_parameters()).values()) < 1e-6
