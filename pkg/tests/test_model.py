import numpy as np
import pytest

from adapterlab import autodiff as ad
from adapterlab.model import (
    ModelConfig,
    ModeError,
    ParameterReport,
    SequenceError,
    TransformerModel,
    base_parameter_count,
    parameter_report,
    parameter_shapes,
)

SMALL = ModelConfig(vocab_size=50, d_model=16, n_layers_encoder=3, n_layers_decoder=2,
                    n_heads=2, d_ff=32, max_seq_len=20)


@pytest.fixture
def model():
    return TransformerModel.init(SMALL, seed=1).eval()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=50, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=50, dropout=1.0)


def test_trace_has_layers_plus_one(model):
    _, trace = model.encode([4, 5, 6], capture=True)
    assert len(trace) == SMALL.n_layers_encoder + 1
    assert all(s.shape == (3, SMALL.d_model) for s in trace.states)


def test_no_trace_without_capture(model):
    _, trace = model.encode([4, 5, 6], capture=False)
    assert trace is None


def test_encode_deterministic_in_eval(model):
    a, _ = model.encode([4, 5, 6, 7])
    b, _ = model.encode([4, 5, 6, 7])
    np.testing.assert_array_equal(a.data, b.data)


def test_distinct_inputs_distinct_outputs(model):
    a, _ = model.encode([4, 5, 6])
    b, _ = model.encode([4, 5, 9])
    assert np.abs(a.data - b.data).max() > 0


def test_encoder_is_bidirectional(model):
    # perturbing the last token changes the first position's state
    a, _ = model.encode([4, 5, 6])
    b, _ = model.encode([4, 5, 9])
    assert np.abs(a.data[0] - b.data[0]).max() > 0


def test_overlong_sequence_rejected(model):
    with pytest.raises(SequenceError):
        model.encode(list(range(4, 4 + SMALL.max_seq_len + 1)))


def test_out_of_vocab_rejected(model):
    with pytest.raises(SequenceError):
        model.encode([4, SMALL.vocab_size])


def test_decoder_causality_exact(model):
    enc, _ = model.encode([4, 5, 6, 7])
    base = model.decode_step(enc, [1, 8, 9, 10])
    perturbed = model.decode_step(enc, [1, 8, 9, 33])
    np.testing.assert_array_equal(base.data[:3], perturbed.data[:3])
    assert np.abs(base.data[3] - perturbed.data[3]).max() > 0


def test_decode_bos_only(model):
    enc, _ = model.encode([4, 5])
    logits = model.decode_step(enc, [1])
    assert logits.shape == (1, SMALL.vocab_size)
    assert np.all(np.isfinite(logits.data))


def test_decode_on_encoder_only_errors():
    enc_only = TransformerModel.init(ModelConfig(vocab_size=50, d_model=16, n_layers_encoder=2,
                                                 n_heads=2, d_ff=32, max_seq_len=16), seed=0)
    x, _ = enc_only.encode([4, 5])
    with pytest.raises(ModeError):
        enc_only.decode_step(x, [1])


def test_encoder_only_has_no_decoder_params():
    cfg = ModelConfig(vocab_size=50, d_model=16, n_layers_encoder=2, n_heads=2, d_ff=32,
                      max_seq_len=16)
    assert not any(name.startswith("dec.") for name in parameter_shapes(cfg))


def test_registry_roundtrip_bitwise(model, tmp_path):
    path = tmp_path / "model.ckpt"
    model.save(path)
    loaded = TransformerModel.load(path)
    assert loaded.config == model.config
    assert set(loaded.params) == set(model.params)
    for name in model.params:
        np.testing.assert_array_equal(loaded.params[name].data, model.params[name].data)


def test_load_then_encode_matches(model, tmp_path):
    path = tmp_path / "model.ckpt"
    model.save(path)
    loaded = TransformerModel.load(path).eval()
    a, _ = model.encode([4, 5, 6])
    b, _ = loaded.encode([4, 5, 6])
    np.testing.assert_array_equal(a.data, b.data)


def test_batch_encode_matches_single(model):
    ids = np.array([[4, 5, 6], [7, 8, 9]])
    hidden, _ = model.encode_batch(ids, np.ones_like(ids))
    single, _ = model.encode([7, 8, 9])
    np.testing.assert_allclose(hidden.data[1], single.data, atol=1e-12)


def test_padding_does_not_change_real_positions(model):
    ids = np.array([[4, 5, 6, 0]])
    mask = np.array([[1, 1, 1, 0]])
    padded, _ = model.encode_batch(ids, mask)
    bare, _ = model.encode([4, 5, 6])
    np.testing.assert_allclose(padded.data[0, :3], bare.data, atol=1e-12)


# ---------------------------------------------------------------------------
# parameter accounting (paper-scale numbers, no allocation)

PAPER_ENC = ModelConfig(vocab_size=50265, d_model=768, n_layers_encoder=12,
                        n_layers_decoder=0, n_heads=12, d_ff=3072, max_seq_len=512)
PAPER_ENC_DEC = ModelConfig(vocab_size=50265, d_model=768, n_layers_encoder=12,
                            n_layers_decoder=12, n_heads=12, d_ff=3072, max_seq_len=512)


def test_single_adapter_param_formula():
    d, m = 768, 128
    assert 2 * d * m + m + d == 197_504


def test_paper_scale_adapter_counts():
    from adapterlab.adapter import AdapterConfig, adapter_parameter_count

    cfg = AdapterConfig(bottleneck_dim=128)
    assert adapter_parameter_count(PAPER_ENC, cfg) == 4_740_096
    assert adapter_parameter_count(PAPER_ENC_DEC, cfg) == 9_480_192


def test_adapter_ratio_matches_published_fraction():
    from adapterlab.adapter import AdapterConfig, adapter_parameter_count

    count = adapter_parameter_count(PAPER_ENC, AdapterConfig(bottleneck_dim=128))
    report = parameter_report(PAPER_ENC, adapter=count)
    ratio = report.ratio_vs_k_monolingual(6)
    assert 0.0055 <= ratio <= 0.0070


def test_parameter_report_without_adapters(model):
    report = parameter_report(model)
    assert report.base_params == base_parameter_count(SMALL)
    assert report.adapter_params == 0
    assert report.trainable_params == report.base_params


def test_base_count_matches_allocated(model):
    total = sum(p.size for p in model.params.values())
    assert total == base_parameter_count(SMALL)
