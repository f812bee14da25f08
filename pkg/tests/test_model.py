"""Descriptor network, triplet loss, hard mining, gradient check, checkpoints."""

import numpy as np
import pytest
import torch

from xmk.dataset import NormStats
from xmk.model import (
    CheckpointError,
    gradient_check,
    load_checkpoint,
    mine_hard_negatives,
    new_descriptor_net,
    save_checkpoint,
    triplet_loss,
)


@pytest.fixture(scope="module")
def net():
    return new_descriptor_net(descriptor_dim=64, patch_size=64, seed=3)


def patches(rng, n, size=64):
    return rng.normal(size=(n, size, size)).astype(np.float32)


class TestForward:
    def test_unit_norm(self, net, rng):
        d = net.describe(patches(rng, 8))
        assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-5)

    def test_deterministic(self, net, rng):
        p = patches(rng, 4)
        assert np.array_equal(net.describe(p), net.describe(p))

    def test_batched_equals_per_patch(self, net, rng):
        p = patches(rng, 6)
        batched = net.describe(p)
        single = np.stack([net.describe(p[i : i + 1])[0] for i in range(6)])
        assert np.allclose(batched, single, atol=1e-6)

    def test_shared_weights_both_branches(self, net, rng):
        p = patches(rng, 3)
        assert np.array_equal(net.describe(p), net.describe(p.copy()))

    def test_wrong_size_rejected(self, net):
        with pytest.raises(ValueError):
            net(torch.zeros(1, 1, 32, 32))

    def test_seeded_init_is_reproducible(self):
        a = new_descriptor_net(descriptor_dim=32, seed=5)
        b = new_descriptor_net(descriptor_dim=32, seed=5)
        for p1, p2 in zip(a.parameters(), b.parameters()):
            assert torch.equal(p1, p2)


class TestTripletLoss:
    def test_coincident_descriptors_give_margin(self):
        d = torch.ones(4, 8) / np.sqrt(8)
        loss = triplet_loss(d, d, d, margin=1.0)
        assert loss.item() == pytest.approx(4 * 1.0)

    def test_far_negative_gives_zero(self):
        a = torch.tensor([[1.0, 0.0]])
        n = torch.tensor([[-1.0, 0.0]])  # |a-n|^2 = 4 >= margin
        loss = triplet_loss(a, a, n, margin=1.0)
        assert loss.item() == 0.0

    def test_hand_computed_2d_case(self):
        a = torch.tensor([[1.0, 0.0]])
        p = torch.tensor([[0.0, 1.0]])
        n = torch.tensor([[-1.0, 0.0]])
        # |a-p|^2 = 2, |a-n|^2 = 4 -> max(0, 2 - 4 + 1) = 0
        assert triplet_loss(a, p, n, margin=1.0).item() == 0.0

    def test_active_hinge_value(self):
        a = torch.tensor([[1.0, 0.0]])
        p = torch.tensor([[0.0, 1.0]])
        n = torch.tensor([[0.0, 1.0]])
        # |a-p|^2 = 2, |a-n|^2 = 2 -> max(0, 1) = 1
        assert triplet_loss(a, p, n, margin=1.0).item() == pytest.approx(1.0)

    def test_nonnegative(self, rng):
        a = torch.from_numpy(rng.normal(size=(16, 8)).astype(np.float32))
        p = torch.from_numpy(rng.normal(size=(16, 8)).astype(np.float32))
        n = torch.from_numpy(rng.normal(size=(16, 8)).astype(np.float32))
        assert triplet_loss(a, p, n).item() >= 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            triplet_loss(torch.zeros(2, 4), torch.zeros(2, 4), torch.zeros(2, 5))


class TestMining:
    def test_b2_swap(self):
        d_a = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        d_p = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        idx = mine_hard_negatives(d_a, d_p)
        assert idx.tolist() == [1, 0]

    def test_near_duplicate_selected(self, rng):
        d_a = torch.from_numpy(rng.normal(size=(8, 16)).astype(np.float32))
        d_p = torch.from_numpy(rng.normal(size=(8, 16)).astype(np.float32))
        d_p[5] = d_a[2] + 1e-4  # near-duplicate of anchor 2
        idx = mine_hard_negatives(d_a, d_p)
        assert idx[2].item() == 5

    def test_never_own_index(self, rng):
        for _ in range(20):
            b = int(rng.integers(2, 33))
            d_a = torch.from_numpy(rng.normal(size=(b, 8)).astype(np.float32))
            d_p = torch.from_numpy(rng.normal(size=(b, 8)).astype(np.float32))
            idx = mine_hard_negatives(d_a, d_p)
            assert all(idx[k].item() != k for k in range(b))

    def test_matches_bruteforce(self, rng):
        for _ in range(30):
            b = int(rng.integers(2, 64))
            d_a = rng.normal(size=(b, 16))
            d_p = rng.normal(size=(b, 16))
            idx = mine_hard_negatives(torch.from_numpy(d_a), torch.from_numpy(d_p))
            dists = np.linalg.norm(d_a[:, None, :] - d_p[None, :, :], axis=2)
            np.fill_diagonal(dists, np.inf)
            assert np.array_equal(idx.numpy(), dists.argmin(axis=1))

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError):
            mine_hard_negatives(torch.zeros(1, 4), torch.zeros(1, 4))


class TestGradientCheck:
    def test_small_net_matches_finite_differences(self, rng):
        net = new_descriptor_net(descriptor_dim=16, patch_size=64, seed=9)
        a = patches(rng, 6)
        p = a + 0.05 * rng.normal(size=a.shape).astype(np.float32)  # active hinge region
        rel = gradient_check(net, a, p, margin=1.0, n_params=50, seed=1)
        assert rel < 1e-3

    def test_inactive_hinge_zero_gradient(self, net, rng):
        a = torch.from_numpy(patches(rng, 4)).unsqueeze(1)
        d = net(a)
        loss = triplet_loss(d, d, -d, margin=1.0)  # |a-n|^2 = 4 > margin, loss 0 exactly
        assert loss.item() == 0.0
        net.zero_grad()
        loss.backward()
        for q in net.parameters():
            assert q.grad is None or torch.all(q.grad == 0)

    def test_margin_doubling_adds_batch_size_and_keeps_gradient(self, rng):
        # unit-norm descriptors have squared distances in [0, 4], so every
        # hinge is active at margin >= 4 and doubling it adds B * margin
        net = new_descriptor_net(descriptor_dim=16, patch_size=64, seed=4)
        a = torch.from_numpy(patches(rng, 5)).unsqueeze(1)
        p = torch.from_numpy(patches(rng, 5)).unsqueeze(1)
        idx = mine_hard_negatives(net(a).detach(), net(p).detach())

        def loss_and_grads(margin):
            net.zero_grad()
            da, dp = net(a), net(p)
            loss = triplet_loss(da, dp, dp[idx], margin=margin)
            loss.backward()
            return loss.item(), [q.grad.clone() for q in net.parameters()]

        base, grads_base = loss_and_grads(4.0)
        doubled, grads_doubled = loss_and_grads(8.0)
        assert doubled - base == pytest.approx(5 * 4.0, rel=1e-5)
        for g1, g2 in zip(grads_base, grads_doubled):
            assert torch.allclose(g1, g2, atol=1e-7)


class TestCheckpoints:
    def test_roundtrip_forward_identical(self, tmp_path, net, rng):
        stats = NormStats(mean=0.25, std=1.5, n_patches=10)
        path = tmp_path / "net.xdsc"
        save_checkpoint(net, path, stats, seed=3, epoch=7)
        loaded, stats2, meta = load_checkpoint(path)
        assert stats2 == stats
        assert meta["epoch"] == 7
        p = patches(rng, 4)
        assert np.array_equal(net.describe(p), loaded.describe(p))

    def test_wrong_descriptor_dim_rejected(self, tmp_path, net):
        stats = NormStats(mean=0.0, std=1.0, n_patches=1)
        path = tmp_path / "net.xdsc"
        save_checkpoint(net, path, stats)
        raw = path.read_bytes()
        header, payload = raw.split(b"\n", 1)
        tampered = header.replace(b'"descriptor_dim": 64', b'"descriptor_dim": 128')
        path.write_bytes(tampered + b"\n" + payload)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path, net):
        stats = NormStats(mean=0.0, std=1.0, n_patches=1)
        path = tmp_path / "net.xdsc"
        save_checkpoint(net, path, stats)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none.xdsc")
