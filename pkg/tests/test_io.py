import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bimodal import errors
from bimodal.io import (
    BLOB_VERSION,
    AudioBuffer,
    GrayImage,
    ModelBlob,
    deserialize_model,
    dump_manifest,
    load_manifest,
    load_model,
    parse_pgm,
    parse_wav,
    save_model,
    serialize_model,
    write_pgm,
    write_wav,
)

from conftest import sample_models, wav_bytes


def test_wav_16bit_scaling():
    audio = parse_wav(wav_bytes([0, 32767, -32768]))
    np.testing.assert_allclose(audio.samples, [0.0, 32767 / 32768, -1.0], rtol=0, atol=0)
    assert audio.samples[1] == pytest.approx(0.99997, abs=1e-5)
    assert audio.sample_rate == 16000


def test_wav_stereo_is_channel_mean():
    audio = parse_wav(wav_bytes([1.0, 0.0], channels=2, bits=32, codec=3))
    np.testing.assert_array_equal(audio.samples, [0.5])


def test_wav_8bit_and_float():
    np.testing.assert_array_equal(parse_wav(wav_bytes([128, 0], bits=8)).samples, [0.0, -1.0])
    np.testing.assert_allclose(parse_wav(wav_bytes([0.25], bits=32, codec=3)).samples, [0.25])


@pytest.mark.parametrize("cut", [3, 11, 20, 30])
def test_wav_truncated_header(cut):
    with pytest.raises(errors.FormatError):
        parse_wav(wav_bytes([0, 1, 2])[:cut])


def test_wav_unsupported_codec():
    with pytest.raises(errors.UnsupportedError):
        parse_wav(wav_bytes([0, 1], bits=24))


@given(st.lists(st.integers(-32768, 32767), min_size=1, max_size=64))
def test_wav_round_trip(values):
    audio = parse_wav(wav_bytes(values))
    again = parse_wav(write_wav(audio))
    np.testing.assert_array_equal(again.samples, audio.samples)


def test_audio_invariants():
    with pytest.raises(errors.ParameterError):
        AudioBuffer([0.0], 0)
    with pytest.raises(errors.ParameterError):
        AudioBuffer([np.nan], 8000)


def test_pgm_p2_and_p5():
    img = parse_pgm(b"P2 2 2 255\n0 10 20 30\n")
    np.testing.assert_array_equal(img.pixels, [[0, 10], [20, 30]])
    raw = parse_pgm(b"P5\n2 2\n255\n" + bytes([7, 0, 255, 3]))
    assert (raw.width, raw.height) == (2, 2)
    np.testing.assert_array_equal(raw.pixels.ravel(), [7, 0, 255, 3])


def test_pgm_comment_in_header():
    img = parse_pgm(b"P2\n# made by hand\n1 1\n255\n9\n")
    assert img.pixels[0, 0] == 9


def test_pgm_errors():
    with pytest.raises(errors.FormatError):
        parse_pgm(b"P6 1 1 255\n\x00\x00\x00")
    with pytest.raises(errors.FormatError):
        parse_pgm(b"P2 2 2 255\n0 10 20\n")
    with pytest.raises(errors.FormatError):
        parse_pgm(b"P5\n2 2\n255\n" + bytes(3))


@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_pgm_round_trip(w, h, data):
    vals = data.draw(st.lists(st.integers(0, 255), min_size=w * h, max_size=w * h))
    img = GrayImage.from_flat(w, h, vals)
    np.testing.assert_array_equal(parse_pgm(write_pgm(img)).pixels, img.pixels)


def test_gray_image_invariants():
    with pytest.raises(errors.ParameterError):
        GrayImage.from_flat(2, 2, [0, 1, 2])
    with pytest.raises(errors.ParameterError):
        GrayImage(np.array([[256.0]]))


def test_manifest_examples():
    m = load_manifest("s001,audio,a.wav,train")
    assert len(m) == 1 and m.entries[0].modality == "audio"
    assert len(load_manifest("")) == 0
    with pytest.raises(errors.ManifestError) as exc:
        load_manifest("s001,video,a.mp4,train")
    assert exc.value.line == 1


def test_manifest_line_numbers_and_duplicates():
    text = "# header\ns1,audio,a.wav,train\ns1,image,b.pgm,moon\n"
    with pytest.raises(errors.ManifestError) as exc:
        load_manifest(text)
    assert exc.value.line == 3
    with pytest.raises(errors.ManifestError):
        load_manifest("s1,audio,a.wav,train\ns2,audio,a.wav,test\n")
    with pytest.raises(errors.ManifestError):
        load_manifest(",audio,a.wav,train\n")


def test_manifest_dump_round_trip():
    text = "s1,audio,a.wav,train\ns2,image,b.pgm,test\n"
    assert dump_manifest(load_manifest(text)) == text


def _state_equal(a, b):
    ma, aa = a.to_state()
    mb, ab = b.to_state()
    assert ma == mb
    assert sorted(aa) == sorted(ab)
    for k in aa:
        np.testing.assert_array_equal(np.asarray(aa[k]), np.asarray(ab[k]))


@pytest.mark.parametrize("name", list(sample_models()))
def test_blob_round_trip_every_model(name):
    model = sample_models()[name]
    blob = serialize_model(model, {"command": "t", "seed": 1})
    again, prov = deserialize_model(ModelBlob.from_bytes(blob.to_bytes()), with_provenance=True)
    assert type(again) is type(model)
    assert prov == {"command": "t", "seed": 1}
    _state_equal(model, again)
    assert serialize_model(again, prov).to_bytes() == blob.to_bytes()


def test_blob_gmm_two_components_identical(tmp_path):
    gmm = sample_models()["gmm"]
    save_model(gmm, tmp_path / "g.blob")
    back = load_model(tmp_path / "g.blob")
    for f in ("weights", "means", "variances", "var_floor"):
        np.testing.assert_array_equal(getattr(back, f), getattr(gmm, f))


def test_blob_version_and_integrity():
    blob = serialize_model(sample_models()["pca"])
    with pytest.raises(errors.VersionError):
        deserialize_model(ModelBlob(blob.kind, BLOB_VERSION + 1, blob.payload))
    with pytest.raises(errors.IntegrityError):
        deserialize_model(ModelBlob(blob.kind, BLOB_VERSION, b""))
    flipped = bytearray(blob.payload)
    flipped[-1] ^= 0xFF
    with pytest.raises(errors.IntegrityError):
        deserialize_model(ModelBlob(blob.kind, BLOB_VERSION, bytes(flipped)))
    with pytest.raises(errors.IntegrityError):
        deserialize_model(ModelBlob("gmm", BLOB_VERSION, blob.payload))
    with pytest.raises(errors.FormatError):
        ModelBlob.from_bytes(b"NOPE" + struct.pack("<IB", 1, 0))
