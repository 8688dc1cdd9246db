"""Tests for the weight ranking and the conditional-jump sweep."""

import pytest

from decoy.engine import compute_gradients, init_network, quantize
from decoy.image import CODE, WEIGHTS, BitAddress, build_image, weight_byte_count
from decoy.search import (
    BENIGN,
    CODE_LEVEL,
    CRASH,
    DROP,
    MODEL,
    TIMEOUT,
    CodeJump,
    SweepTrial,
    VulnerabilityList,
    rank_vulnerable_weights,
    search_code_vulnerabilities,
)


class TestModelSearch:
    def test_top_k(self, model_vulns, image):
        assert len(model_vulns) == 20
        assert model_vulns.level == MODEL
        weights = image.section(WEIGHTS)
        for entry in model_vulns:
            assert entry.address.bit_index == 7
            assert weights.offset <= entry.address.byte_offset < weights.offset + weight_byte_count(image)

    def test_sorted_by_score(self, model_vulns):
        scores = [e.score for e in model_vulns]
        assert scores == sorted(scores, reverse=True)
        assert scores[-1] > 0

    def test_provenance_points_at_weight(self, model_vulns, image):
        entry = model_vulns.entries[0]
        assert image.layout.inverse(entry.address.byte_offset) == entry.provenance.coord
        assert len(entry.provenance.bits) == 8

    def test_deterministic(self, net, dataset, model_vulns):
        assert rank_vulnerable_weights(net, dataset, 20).addresses() == model_vulns.addresses()

    def test_k_zero(self, net, dataset):
        assert len(rank_vulnerable_weights(net, dataset, 0)) == 0

    def test_k_larger_than_weights(self, net, dataset):
        total = sum(layer.weights.size for layer in net.layers)
        assert len(rank_vulnerable_weights(net, dataset, total + 50)) == total

    def test_negative_k(self, net, dataset):
        with pytest.raises(ValueError):
            rank_vulnerable_weights(net, dataset, -1)

    def test_rejects_unsorted(self, model_vulns):
        with pytest.raises(ValueError):
            VulnerabilityList(tuple(reversed(model_vulns.entries)), 1.0)

    def test_matches_brute_force_for_every_k(self, dataset):
        small = quantize(init_network([16, 8, 4], 4, seed=3))
        grads = compute_gradients(small, dataset)
        slots = build_image(small).layout.slots
        ranked = sorted(
            (-float(abs(g)), layer, flat)
            for layer, grad in enumerate(grads.grads)
            for flat, g in enumerate(grad.ravel())
        )
        expected = [BitAddress(slots[layer].weight_offset + flat, 7) for _, layer, flat in ranked]
        assert len(expected) == 16 * 8 + 8 * 4
        for k in range(len(expected) + 1):
            assert rank_vulnerable_weights(small, dataset, k).addresses() == expected[:k]


class TestCodeSearch:
    def test_every_jump_tried(self, code_vulns, kernel):
        assert code_vulns.level == CODE_LEVEL
        assert len(code_vulns.trials) == len(kernel.conditional_jumps()) == 17

    def test_finds_drops(self, code_vulns):
        assert len(code_vulns) >= 1
        assert code_vulns.stats()[DROP] == len(code_vulns)
        for entry in code_vulns:
            assert isinstance(entry.provenance, CodeJump)
            assert entry.address.bit_index == 0

    def test_empty_guard_flip_is_critical(self, code_vulns):
        labels = {e.provenance.label for e in code_vulns}
        assert "empty_guard" in labels

    def test_shape_checks_crash(self, code_vulns):
        outcome = {t.jump.label: t.outcome for t in code_vulns.trials}
        for label in ("m_guard", "k_guard", "w_guard", "x_guard", "col_guard", "store_guard"):
            assert outcome[label] == CRASH

    def test_redundant_paths_benign(self, code_vulns):
        outcome = {t.jump.label: t.outcome for t in code_vulns.trials}
        for label in ("tile_select", "tile_clip", "sat_sign"):
            assert outcome[label] == BENIGN

    def test_drops_are_a_minority(self, code_vulns):
        stats = code_vulns.stats()
        assert 2 * stats[DROP] < len(code_vulns.trials)

    def test_tile_exit_times_out(self, code_vulns):
        outcome = {t.jump.label: t.outcome for t in code_vulns.trials}
        assert outcome["tile_exit"] == TIMEOUT

    def test_every_jump_reached(self, code_vulns):
        assert not any(t.pruned for t in code_vulns.trials)
        assert code_vulns.stats()["unreached"] == 0

    def test_benign_share_over_reached_jumps(self, code_vulns):
        jump = code_vulns.trials[0].jump
        address = code_vulns.trials[0].address
        trials = (
            SweepTrial(jump, address, BENIGN, 0.9, 0, pruned=True),
            SweepTrial(jump, address, BENIGN, 0.9, 0, pruned=True),
            SweepTrial(jump, address, BENIGN, 0.9, 10),
            SweepTrial(jump, address, DROP, 0.2, 10),
        )
        vl = VulnerabilityList((), 0.9, CODE_LEVEL, trials)
        assert vl.benign_share() == 0.5
        assert vl.stats() == {BENIGN: 1, DROP: 1, CRASH: 0, TIMEOUT: 0, "unreached": 2}

    def test_benign_share_without_trials(self):
        assert VulnerabilityList((), 1.0, CODE_LEVEL).benign_share() is None

    def test_addresses_in_code(self, code_vulns, vm_image):
        code = vm_image.section(CODE)
        for trial in code_vulns.trials:
            assert code.offset <= trial.address.byte_offset < code.end

    def test_image_untouched(self, vm_image, vm_net, kernel, code_vulns):
        assert vm_image.digest() == build_image(vm_net, kernel).digest()

    def test_bad_tolerance(self, vm_image, dataset):
        with pytest.raises(ValueError):
            search_code_vulnerabilities(vm_image, dataset, drop_tolerance=0)

