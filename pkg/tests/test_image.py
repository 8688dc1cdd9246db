"""Tests for the flat memory image and its coordinate map."""

import struct

import numpy as np
import pytest

from decoy.engine import forward
from decoy.errors import FormatError, OutOfRangeError, UnknownCoordinateError
from decoy.image import (
    CODE,
    WEIGHTS,
    BitAddress,
    CoordinateMap,
    WeightCoord,
    build_image,
    deserialize_image,
    flip_bit,
    flip_bits,
    load_image,
    locate_weight,
    save_image,
    serialize_image,
    sidecar_path,
    weight_byte_count,
)


class TestBitAddress:
    def test_text_form(self):
        assert str(BitAddress(12, 7)) == "12:7"
        assert BitAddress.parse("12:7") == BitAddress(12, 7)

    def test_bit_range(self):
        with pytest.raises(ValueError):
            BitAddress(0, 8)

    def test_ordering(self):
        assert sorted([BitAddress(2, 0), BitAddress(1, 7), BitAddress(1, 0)])[0] == BitAddress(1, 0)


class TestLayout:
    def test_sections(self, image, vm_image, kernel):
        assert image.section(CODE).length == 0
        assert vm_image.section(CODE).length == len(kernel.bytecode)
        assert vm_image.section(CODE).offset == vm_image.section(WEIGHTS).end

    def test_weights_then_biases(self, net, image):
        slots = image.layout.slots
        assert slots[0].weight_offset == 0
        assert slots[1].weight_offset == net.layers[0].weights.size
        assert slots[0].bias_offset == weight_byte_count(image)
        assert image.section(WEIGHTS).length == weight_byte_count(image) + 4 * sum(l.out_units for l in net.layers)

    def test_network_round_trip(self, net, image, dataset):
        assert np.array_equal(forward(image.network(), dataset.eval.x), forward(net, dataset.eval.x))

    def test_needs_quantized_net(self, float_net):
        with pytest.raises(ValueError):
            build_image(float_net)

    def test_locate_weight(self, net, image):
        loc = locate_weight(image, 1, (3, 5))
        assert loc.byte_offset == net.layers[0].weights.size + 3 * 32 + 5
        assert loc.msb == BitAddress(loc.byte_offset, 7)
        assert image.payload[loc.byte_offset] == net.layers[1].weights[3, 5].astype(np.uint8)

    def test_locate_outside_layer(self, image):
        with pytest.raises(UnknownCoordinateError):
            locate_weight(image, 0, (99, 0))

    def test_inverse(self, image):
        loc = locate_weight(image, 2, (1, 2))
        assert image.layout.inverse(loc.byte_offset) == WeightCoord(2, (1, 2))
        assert image.layout.inverse(image.layout.slots[0].bias_offset + 4).bias
        assert image.layout.inverse(image.size + 10) is None

    def test_locate_inverse_exhaustive(self, net, image):
        for layer, q in enumerate(net.layers):
            for index in np.ndindex(q.weights.shape):
                loc = locate_weight(image, layer, index)
                assert image.layout.inverse(loc.byte_offset) == WeightCoord(layer, index)
        for offset in range(weight_byte_count(image)):
            coord = image.layout.inverse(offset)
            assert locate_weight(image, coord.layer, coord.index).byte_offset == offset

    def test_original_coordinates(self, image):
        assert image.layout.original(WeightCoord(1, (3, 5))) == (1, (3, 5), False)

    def test_map_dict(self, vm_image):
        layout = CoordinateMap.from_dict(vm_image.layout.to_dict())
        assert layout == vm_image.layout


class TestFlips:
    def test_flip_changes_one_bit(self, image):
        a = locate_weight(image, 0, (0, 0)).msb
        flipped = flip_bit(image, a)
        diff = np.frombuffer(flipped.payload, np.uint8) ^ np.frombuffer(image.payload, np.uint8)
        assert diff.sum() == 0x80
        assert flipped.network().layers[0].weights[0, 0] != image.network().layers[0].weights[0, 0]

    def test_double_flip_restores(self, image):
        a = BitAddress(5, 3)
        assert flip_bits(image, [a, a]).digest() == image.digest()

    def test_out_of_range(self, image):
        with pytest.raises(OutOfRangeError):
            flip_bit(image, BitAddress(image.size, 0))


class TestFiles:
    def test_save_load(self, vm_image, tmp_path):
        path = tmp_path / "model.barm"
        save_image(vm_image, path)
        assert sidecar_path(path).exists()
        loaded = load_image(path)
        assert loaded.digest() == vm_image.digest()
        assert loaded.sections == vm_image.sections
        assert loaded.page_size == 4096

    def test_header_layout(self, vm_image):
        data = serialize_image(vm_image)
        assert data[:8] == b"BARM" + struct.pack("<HH", 1, len(vm_image.sections))
        name, offset, length = struct.unpack_from("<8sQQ", data, 8)
        assert name.rstrip(b"\0").decode() == vm_image.sections[0].name
        assert (offset, length) == (vm_image.sections[0].offset, vm_image.sections[0].length)
        assert len(data) == 8 + 24 * len(vm_image.sections) + vm_image.size

    def test_bad_magic(self, image):
        data = b"XXXX" + serialize_image(image)[4:]
        with pytest.raises(FormatError):
            deserialize_image(data, image.layout)

    def test_truncated(self, vm_image):
        data = serialize_image(vm_image)[:-5]
        with pytest.raises(FormatError):
            deserialize_image(data, vm_image.layout)

    def test_missing_sidecar(self, image, tmp_path):
        path = tmp_path / "bare.barm"
        path.write_bytes(serialize_image(image))
        with pytest.raises(FormatError):
            load_image(path)
