"""Tests for dummy-operation insertion and pattern enforcement."""

import hashlib
from dataclasses import replace

import numpy as np
import pytest

from decoy.attack import AdaptiveRangeSpec, adaptive_flip_set, replay
from decoy.engine import NONE, Outcome, evaluate, forward, generate_dataset, quantize, train
from decoy.errors import BoundaryLayerError, NonIdempotentActivationError, StaleLocationError
from decoy.image import CODE, WEIGHTS, build_image
from decoy.obfuscate import (
    DUMMY_CONV1X1,
    DummyLayer,
    DummyNeurons,
    Nops,
    ObfuscationPattern,
    apply_pattern,
    draw_records,
    dummy_layer_bytes,
    generate_pattern,
    insert_dummy_layer,
    insert_dummy_neurons,
    insert_nops,
    nop_anchors,
    relocate_address,
    stuck_addresses,
)
from decoy.search import CODE_LEVEL, rank_vulnerable_weights
from decoy.vm import VmKernel, assemble, execute, program_from_image

from tests.conftest import STEP_BUDGET


@pytest.fixture(scope="module")
def conv_net():
    ds = generate_dataset(1, 10, 4, 16)
    return quantize(train(["1x4x4", "conv:4:3", 4], ds, epochs=3, lr=0.05, seed=2)), ds


class TestDummyLayer:
    def test_linear_identity_is_exact(self, net, dataset):
        obf = insert_dummy_layer(net, 0)
        assert len(obf.layers) == len(net.layers) + 1
        assert obf.layers[1].origin == -1
        assert np.array_equal(forward(obf, dataset.x), forward(net, dataset.x))

    def test_conv1x1_is_exact(self, conv_net):
        net, ds = conv_net
        obf = insert_dummy_layer(net, 0)
        assert obf.layers[1].weights.shape == (4, 4, 1, 1)
        assert np.array_equal(forward(obf, ds.x), forward(net, ds.x))

    def test_stacked(self, net, dataset):
        obf = insert_dummy_layer(insert_dummy_layer(net, 1), 0)
        assert np.array_equal(forward(obf, dataset.x), forward(net, dataset.x))

    def test_not_after_last_layer(self, net):
        with pytest.raises(BoundaryLayerError):
            insert_dummy_layer(net, len(net.layers) - 1)

    def test_needs_relu(self, net):
        linear_first = net.with_layers((replace(net.layers[0], activation=NONE),) + net.layers[1:])
        with pytest.raises(NonIdempotentActivationError):
            insert_dummy_layer(linear_first, 0)

    def test_kind_must_match(self, net):
        with pytest.raises(ValueError):
            insert_dummy_layer(net, 0, DUMMY_CONV1X1)


class TestDummyNeurons:
    def test_exact(self, net, dataset):
        obf = insert_dummy_neurons(net, 0, 3, 5)
        assert obf.layers[0].out_units == net.layers[0].out_units + 3
        assert obf.layers[1].in_units == net.layers[1].in_units + 3
        assert obf.layers[0].rows()[5:8] == (-1, -1, -1)
        assert np.array_equal(forward(obf, dataset.x), forward(net, dataset.x))

    def test_into_vm_layer(self, vm_net, kernel, dataset):
        obf = insert_dummy_neurons(vm_net, 1, 2)
        x = dataset.eval.x
        assert np.array_equal(forward(obf, x, VmKernel(kernel)), forward(vm_net, x))

    def test_flatten_boundary(self, conv_net):
        with pytest.raises(BoundaryLayerError):
            insert_dummy_neurons(conv_net[0], 0, 1)

    def test_final_layer(self, net):
        with pytest.raises(BoundaryLayerError):
            insert_dummy_neurons(net, len(net.layers) - 1, 1)

    def test_needs_one_neuron(self, net):
        with pytest.raises(ValueError):
            insert_dummy_neurons(net, 0, 0)


class TestNops:
    def test_zero_count(self, kernel):
        with pytest.raises(ValueError):
            insert_nops(kernel, kernel.entry, 0)

    def test_adds_steps_only(self):
        prog = assemble("LOADI r0, 0\nLOADI r1, 7\nSTORE [r0+0], r1\nHALT")
        padded = insert_nops(prog, 6, 5)
        before, after = execute(prog, [0]), execute(padded, [0])
        assert after.memory.tolist() == before.memory.tolist() == [7]
        assert after.steps == before.steps + 5


class TestPatterns:
    def test_vulnerable_layers_always_covered(self, image, model_vulns):
        records = draw_records(image, [model_vulns], 0.0, 3)
        layers = {e.provenance.coord.layer for e in model_vulns}
        assert {r.element for r in records} == layers

    def test_vulnerable_jumps_always_displaced(self, vm_image, code_vulns):
        anchors = nop_anchors(program_from_image(vm_image))
        records = draw_records(vm_image, [code_vulns], 0.0, 3)
        assert all(isinstance(r, Nops) for r in records)
        assert {r.offset for r in records} == {anchors[e.provenance.offset] for e in code_vulns}
        assert all(1 <= r.count <= 16 for r in records)
        assert stuck_addresses(vm_image, ObfuscationPattern(records, 0.0, 0), code_vulns.addresses()) == set()

    def test_nops_stay_out_of_loops(self, vm_image, code_vulns):
        prog = program_from_image(vm_image)
        loop = range(prog.labels["row_loop"], prog.labels["done"])
        records = draw_records(vm_image, [code_vulns], 1.0, 3)
        assert {r.offset for r in records} == {ins.offset for ins in prog.instructions() if ins.offset not in loop}

    def test_loop_nops_run_once_per_call(self, vm_image, dataset, code_vulns):
        pattern = ObfuscationPattern(draw_records(vm_image, [code_vulns], 0.0, 3), 0.0, 0)
        obf = apply_pattern(vm_image, pattern)
        clean_kernel = VmKernel(program_from_image(vm_image), STEP_BUDGET)
        obf_kernel = VmKernel(program_from_image(obf), STEP_BUDGET)
        evaluate(vm_image.network(), dataset, clean_kernel)
        evaluate(obf.network(), dataset, obf_kernel)
        assert obf_kernel.steps - clean_kernel.steps == pattern.nop_total * clean_kernel.calls

    def test_same_seed_same_pattern(self, image, model_vulns):
        assert draw_records(image, [model_vulns], 0.3, 9) == draw_records(image, [model_vulns], 0.3, 9)

    def test_prob_one_covers_everything(self, image, net):
        records = draw_records(image, [], 1.0, 0)
        assert {r.element for r in records} == set(range(len(net.layers)))

    def test_code_list_leaves_layers_alone(self, vm_image, code_vulns):
        records = draw_records(vm_image, [code_vulns], 1.0, 0)
        assert records and all(isinstance(r, Nops) for r in records)

    def test_dummy_layers_need_room(self, image, net, model_vulns):
        assert dummy_layer_bytes(net.layers[0]) == 32 * 32 + 4 * 32
        tight = [draw_records(image, [model_vulns], 1.0, s) for s in range(10)]
        roomy = [draw_records(image, [model_vulns], 1.0, s, layer_share=1.0) for s in range(10)]
        assert not any(isinstance(r, DummyLayer) for records in tight for r in records)
        assert any(isinstance(r, DummyLayer) for records in roomy for r in records)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_utility_preserved(self, image, net, dataset, model_vulns, seed):
        pattern = generate_pattern(image, model_vulns, prob=0.5, seed=seed)
        obf = apply_pattern(image, pattern)
        assert np.array_equal(forward(obf.network(), dataset.x), forward(net, dataset.x))
        assert obf.size > image.size

    def test_every_address_moves(self, image, model_vulns):
        pattern = generate_pattern(image, model_vulns, prob=0.3, seed=4)
        for a in model_vulns.addresses():
            moved = relocate_address(image, pattern, a)
            assert moved is not None
            assert moved != a
        assert stuck_addresses(image, pattern, model_vulns.addresses()) == set()

    def test_dense_lists_still_accepted(self, image, dataset, net):
        dense = rank_vulnerable_weights(net, dataset, 400)
        for prob in (0.1, 0.3, 0.5, 0.7, 0.9):
            pattern = generate_pattern(image, dense, prob=prob, seed=1, max_retries=1)
            assert pattern.generation_retries == 0

    def test_layouts_differ_across_seeds(self, image, dataset, net):
        dense = rank_vulnerable_weights(net, dataset, 400)
        digests = set()
        for seed in range(20):
            obf = apply_pattern(image, generate_pattern(image, dense, prob=0.3, seed=seed))
            digests.add(hashlib.sha256(obf.section_bytes(WEIGHTS)).hexdigest())
        assert len(digests) >= 19

    def test_research_is_disjoint(self, image, dataset, model_vulns):
        pattern = generate_pattern(image, model_vulns, prob=0.3, seed=5, ds=dataset, layer_share=1.0)
        obf = apply_pattern(image, pattern)
        fresh = rank_vulnerable_weights(obf.network(), dataset, len(model_vulns))
        assert fresh.address_set().isdisjoint(model_vulns.address_set())
        assert pattern.image_digest == image.digest()
        assert obf.network().weight_count > image.network().weight_count

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_old_jump_flips_never_degrade_silently(self, vm_image, dataset, code_vulns, seed):
        windows = [[AdaptiveRangeSpec(x1=5)], [AdaptiveRangeSpec(x1=5, x2=1)]]
        pattern = generate_pattern(
            vm_image,
            code_vulns,
            prob=0.3,
            seed=seed,
            ds=dataset,
            step_budget=STEP_BUDGET,
            research=False,
            windows=windows,
        )
        obf = apply_pattern(vm_image, pattern)
        floor = code_vulns.baseline_accuracy - 0.05
        for a in code_vulns.addresses():
            flip_sets = [[a]] + [adaptive_flip_set([a], g[0], CODE_LEVEL, obf.size) for g in windows]
            for flips in flip_sets:
                report = replay(obf, flips, dataset, STEP_BUDGET).report
                assert report.outcome is not Outcome.OK or report.accuracy >= floor

    def test_vm_image_utility(self, vm_image, vm_net, dataset, code_vulns):
        pattern = generate_pattern(vm_image, code_vulns, prob=0.3, seed=6)
        obf = apply_pattern(vm_image, pattern)
        assert pattern.nop_total > 0
        assert obf.section(CODE).length == len(program_from_image(obf).bytecode)
        assert obf.section(CODE).length > vm_image.section(CODE).length
        x = dataset.eval.x
        kernel = VmKernel(program_from_image(obf), STEP_BUDGET)
        assert np.array_equal(forward(obf.network(), x, kernel), forward(vm_net, x))

    def test_stale_pattern(self, image, vm_image, model_vulns):
        pattern = generate_pattern(image, model_vulns, seed=1)
        with pytest.raises(StaleLocationError):
            apply_pattern(vm_image, pattern)

    def test_empty_pattern_is_identity(self, image):
        obf = apply_pattern(image, ObfuscationPattern((), 0.0, 0))
        assert obf.digest() == image.digest()

    def test_explicit_records(self, net, image, dataset):
        pattern = ObfuscationPattern((DummyNeurons(0, 0, 2, 0), DummyLayer(2, 1, "linear")), 0.0, 0)
        obf = apply_pattern(image, pattern)
        assert len(obf.network().layers) == len(net.layers) + 1
        assert np.array_equal(forward(obf.network(), dataset.x), forward(net, dataset.x))

    def test_bad_prob(self, image, model_vulns):
        with pytest.raises(ValueError):
            generate_pattern(image, model_vulns, prob=1.5)

    def test_build_image_keeps_code(self, vm_image):
        assert build_image(vm_image.network(), program_from_image(vm_image)).digest() == vm_image.digest()
