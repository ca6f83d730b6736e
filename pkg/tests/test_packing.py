import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pfadapt.model import ModelConfig, ParamStore, forward, init_params
from pfadapt.numcore import Adam, LrSchedule, backprop
from pfadapt.packing import (
    FREE,
    SHARED,
    OwnershipMask,
    base_mask,
    capacity_schedule,
    claim_survivors,
    equal_share_ratios,
    gradient_gate,
    magnitude_prune,
    masked_view,
    pruned_count,
)
from pfadapt.pipeline import sequence_loss


def sort_oracle(values, candidates, ratio):
    """Smallest floor(ratio * n) candidates by (|w|, flat index)."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    cand = [i for i in range(flat.size) if candidates is None or candidates.reshape(-1)[i]]
    ranked = sorted(cand, key=lambda i: (abs(flat[i]), i))
    k = int(np.floor(ratio * len(cand) + 1e-9))
    return sorted(ranked[:k])


class TestMagnitudePrune:
    def test_two_smallest(self):
        idx = magnitude_prune(torch.tensor([0.3, -0.1, 0.5, 0.05]), None, 0.5)
        assert idx.tolist() == [1, 3]

    def test_ratio_zero(self):
        assert magnitude_prune(torch.randn(10), None, 0.0).numel() == 0

    def test_ratio_out_of_range(self):
        with pytest.raises(ValueError):
            magnitude_prune(torch.randn(4), None, 1.5)

    def test_ties_prune_lower_index(self):
        idx = magnitude_prune(torch.tensor([0.2, -0.2, 0.2, 0.1]), None, 0.5)
        assert idx.tolist() == [0, 3]

    def test_thousand_weights_ratio_075(self):
        w = torch.randn(1000, generator=torch.Generator().manual_seed(4))
        assert magnitude_prune(w, None, 0.75).tolist() == sort_oracle(w.numpy(), None, 0.75)

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError):
            magnitude_prune(torch.randn(3), torch.zeros(3, dtype=torch.bool), 0.5)

    def test_respects_candidates(self):
        w = torch.tensor([[0.01, 5.0], [0.02, 3.0]])
        cand = torch.tensor([[False, True], [False, True]])
        assert magnitude_prune(w, cand, 0.5).tolist() == [3]

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float32, st.integers(1, 64), elements=st.sampled_from([0.0, 0.5, -0.5, 1.0, -2.0, 0.25, 3.0])),
        st.sampled_from([0.0, 0.25, 0.5, 0.75, 0.99]),
        st.integers(0, 2**31 - 1),
    )
    def test_matches_sort_oracle(self, values, ratio, seed):
        cand = np.random.default_rng(seed).random(values.size) < 0.7
        cand[0] = True
        got = magnitude_prune(torch.from_numpy(values), torch.from_numpy(cand), ratio).tolist()
        assert got == sort_oracle(values, cand, ratio)

    def test_pruned_count_slack(self):
        assert pruned_count(1 - 1 / 3, 1536) == 1024
        assert pruned_count(0.75, 7) == 5


def toy_mask():
    return OwnershipMask({"w": torch.tensor([[1, 0, 0, 1], [0, 0, 0, 0], [0, 0, 1, 1]], dtype=torch.uint8)})


class TestClaim:
    def test_two_of_eight_claimed(self):
        mask = toy_mask()
        free = {"w": mask["w"] == FREE}
        free_idx = torch.nonzero(free["w"].reshape(-1)).reshape(-1)
        pruned = {"w": free_idx[:6]}
        out = claim_survivors(mask, free, pruned, 2)
        assert int((out["w"] == 2).sum()) == 2
        assert torch.equal(out["w"].reshape(-1)[free_idx[6:]], torch.tensor([2, 2], dtype=torch.uint8))
        assert torch.equal(out["w"] == 1, mask["w"] == 1)

    def test_all_pruned_claims_nothing(self):
        mask = toy_mask()
        free = {"w": mask["w"] == FREE}
        pruned = {"w": torch.nonzero(free["w"].reshape(-1)).reshape(-1)}
        out = claim_survivors(mask, free, pruned, 2)
        assert int((out["w"] == 2).sum()) == 0

    def test_overlap_rejected(self):
        mask = toy_mask()
        with pytest.raises(ValueError):
            claim_survivors(mask, {"w": torch.ones(3, 4, dtype=torch.bool)}, {"w": torch.tensor([], dtype=torch.long)}, 2)

    def test_existing_owner_rejected(self):
        mask = toy_mask()
        with pytest.raises(ValueError):
            claim_survivors(mask, {"w": mask["w"] == FREE}, {}, 1)

    def test_pruned_outside_trained_rejected(self):
        mask = toy_mask()
        with pytest.raises(ValueError):
            claim_survivors(mask, {"w": mask["w"] == FREE}, {"w": torch.tensor([0])}, 2)


def small_store():
    cfg = ModelConfig(vocab_size=12, num_heads=2, num_encoder_layers=1, num_decoder_layers=1, embed_dim=8, ffn_dim=16)
    return cfg, init_params(cfg, torch.Generator().manual_seed(0))


def layered_mask(params: ParamStore) -> OwnershipMask:
    """Owners cycle 0,1,2,3 over each prunable tensor's flat index."""
    owners = {}
    for n in params.prunable_names():
        t = params[n].tensor
        owners[n] = (torch.arange(t.numel()) % 4).to(torch.uint8).view(t.shape)
    return OwnershipMask(owners, num_pairs=2)


class TestMaskedView:
    def test_inactive_elements_read_zero(self):
        _, params = small_store()
        mask = layered_mask(params)
        view = masked_view(params.tensors(), mask, {1, 2})
        for n in params:
            if n in mask.owners:
                keep = (mask[n] == 1) | (mask[n] == 2)
                assert torch.equal(view[n][keep], params[n].tensor[keep])
                assert bool((view[n][~keep] == 0).all())
            else:
                assert view[n] is params[n].tensor

    def test_full_active_set_is_identity(self):
        _, params = small_store()
        mask = layered_mask(params)
        view = masked_view(params.tensors(), mask, {0, 1, 2, 3})
        assert all(torch.equal(view[n], params[n].tensor) for n in params)

    def test_shared_only_matches_pruned_network(self):
        _, params = small_store()
        mask = layered_mask(params)
        pruned = params.clone()
        for n in mask:
            pruned[n].tensor[mask[n] != SHARED] = 0.0
        view = masked_view(params.tensors(), mask, {SHARED})
        assert all(torch.equal(view[n], pruned[n].tensor) for n in params)

    def test_empty_active_rejected(self):
        _, params = small_store()
        with pytest.raises(ValueError):
            masked_view(params.tensors(), layered_mask(params), set())


class TestGradientGate:
    def test_bilingual_stage_only_free(self):
        _, params = small_store()
        mask = layered_mask(params)
        grads = {n: torch.ones_like(p.tensor) for n, p in params.items()}
        gated = gradient_gate(grads, mask, {FREE}, include_nonprunable=False)
        for n in params:
            if n in mask.owners:
                assert torch.equal(gated[n] != 0, mask[n] == FREE)
            else:
                assert bool((gated[n] == 0).all())

    def test_empty_trainable_zeroes_everything(self):
        _, params = small_store()
        grads = {n: torch.randn(p.tensor.shape) for n, p in params.items()}
        gated = gradient_gate(grads, layered_mask(params), set(), include_nonprunable=False)
        assert all(bool((g == 0).all()) for g in gated.values())

    def test_five_gated_steps_touch_only_trainable(self):
        cfg, params = small_store()
        mask = layered_mask(params)
        before = params.clone()
        w = params.tensors()
        upd = {n: (mask.member(n, {SHARED}) if n in mask.owners else None) for n in w}
        opt = Adam(LrSchedule(1e-2, 2))
        src = torch.tensor([[10, 3, 4, 5]])
        tin, tout = torch.tensor([[1, 6, 7]]), torch.tensor([[6, 7, 2]])
        for v in w.values():
            v.requires_grad_(True)
        for _ in range(5):
            loss = sequence_loss(forward(masked_view(w, mask, {SHARED}), cfg, src, tin), tout)
            grads = gradient_gate(backprop(loss, w), mask, {SHARED}, include_nonprunable=True)
            opt.step(w, grads, upd)
        for n in w:
            delta = (w[n].detach() - before[n].tensor).abs()
            if n in mask.owners:
                assert float(delta[mask[n] != SHARED].max()) == 0.0
                assert float(delta[mask[n] == SHARED].max()) > 0.0
            elif n.endswith("gain") or n == "emb.weight":
                assert float(delta.max()) > 0.0


class TestCapacity:
    @pytest.mark.parametrize("k,expected", [(1, 0.125), (2, 0.09375)])
    def test_schedule_values(self, k, expected):
        assert capacity_schedule(0.5, 0.75, k) == expected

    def test_late_pair_still_gets_two_percent(self):
        assert capacity_schedule(0.5, 0.75, 7) == pytest.approx(0.0222, abs=5e-5)
        assert capacity_schedule(0.5, 0.75, 7) >= 0.02

    def test_equal_share_four(self):
        r = equal_share_ratios(0.5, 4)
        assert r == pytest.approx([0.75, 2 / 3, 0.5, 0.0], abs=1e-15)

    @pytest.mark.parametrize("M,expected", [(1, [0.0]), (2, [0.5, 0.0])])
    def test_equal_share_small(self, M, expected):
        assert equal_share_ratios(0.5, M) == expected

    @pytest.mark.parametrize("M", [1, 2, 3, 4, 7])
    def test_equal_share_keeps_equal_fractions(self, M):
        F = 0.5
        remaining = F
        kept = []
        for r in equal_share_ratios(F, M):
            kept.append(remaining * (1 - r))
            remaining *= r
        assert kept == pytest.approx([F / M] * M, rel=1e-12)

    def test_simulated_ledger_within_one_element(self):
        n = 4096 + 80 * 64
        free = n - pruned_count(0.5, n)
        for k in range(1, 9):
            keep = free - pruned_count(0.75, free)
            assert abs(keep - n * capacity_schedule(0.5, 0.75, k)) < 1.0
            free -= keep


class TestHistogram:
    def test_partition_sums_to_total(self):
        _, params = small_store()
        mask = layered_mask(params)
        rep = mask.histogram()
        assert sum(rep.counts.values()) == rep.total == sum(params[n].tensor.numel() for n in mask)
        assert sum(rep.fractions.values()) == pytest.approx(1.0, abs=1e-12)

    def test_base_mask(self):
        _, params = small_store()
        idx = {n: magnitude_prune(params[n].tensor, None, 0.5) for n in params.prunable_names()}
        mask = base_mask(params, idx)
        for n, i in idx.items():
            assert int((mask[n] == FREE).sum()) == params[n].tensor.numel() // 2
            assert bool((mask[n].reshape(-1)[i] == FREE).all())
