import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrmcap.data import (BECAUSE, SO, THEN, DatasetFormatError, DatasetSchemaError, GeneratorConfig,
                          VideoSample, VocabularyOverflowError, build_vocabulary, compose_caption,
                          dataset_stats, generate_dataset, generator_vocabulary, generator_world,
                          read_dataset, write_dataset)
from ctrmcap.decoder import UNK


def test_same_seed_gives_identical_datasets(tmp_path):
    config = GeneratorConfig(seed=11)
    a, b = generate_dataset(config, 30), generate_dataset(config, 30)
    assert a == b
    write_dataset(a, tmp_path / "a.jsonl")
    write_dataset(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert generate_dataset(GeneratorConfig(seed=12), 30) != a


def test_no_causal_edges_beyond_the_chain():
    config = GeneratorConfig(n_events_per_video=(2, 2), frames_per_event=(1, 1), causal_edge_prob=0.0)
    for s in generate_dataset(config, 20):
        assert THEN in s.words and BECAUSE not in s.words and SO not in s.words
        assert s.causal_edges == ((0, 1),)


def test_single_event_video():
    config = GeneratorConfig(n_events_per_video=(1, 1))
    for s in generate_dataset(config, 10):
        assert len(s.caption) == 3
        assert not s.annotation.adjacency.any()


def test_edges_point_forward_between_event_anchors():
    for s in generate_dataset(GeneratorConfig(n_events_per_video=(1, 4), frames_per_event=(1, 3)), 100):
        anchors = {e: s.event_ids.index(e) for e in set(s.event_ids)}
        adj = s.annotation.adjacency
        assert np.array_equal(adj, np.triu(adj, 1))
        for a, b in s.causal_edges:
            assert a in anchors.values() and b in anchors.values()
            assert s.event_ids[a] < s.event_ids[b]
        chain = {(anchors[e], anchors[e + 1]) for e in range(len(anchors) - 1)}
        assert chain <= set(s.causal_edges)


def test_nonchain_edges_follow_the_type_graph():
    config = GeneratorConfig(n_events_per_video=(3, 3), seed=4)
    world = generator_world(config)
    index = {n: i for i, n in enumerate(world.names)}
    for s in generate_dataset(config, 50):
        names = s.event_sequence()
        linked = world.type_graph[index[names[0]], index[names[2]]]
        assert s.has_nonchain_edge() == bool(linked)


def test_caption_grammar():
    assert compose_caption(["fall", "break", "spill"], [(0, 2)]) == (
        "<bos>", "fall", "then", "break", "then", "spill", "because", "fall", "so", "spill", "<eos>")


def test_zero_noise_frames_equal_prototypes():
    config = GeneratorConfig(feature_noise_sigma=0.0, seed=2)
    world = generator_world(config)
    index = {n: i for i, n in enumerate(world.names)}
    for s in generate_dataset(config, 20):
        names = s.event_sequence()
        for frame, e in zip(s.frames, s.event_ids):
            assert np.array_equal(frame, world.prototypes[index[names[e]]])


def test_vocabulary_is_closed_and_stats_reproducible():
    config = GeneratorConfig(seed=5)
    data = generate_dataset(config, 60)
    vocab = generator_vocabulary(config)
    for s in data:
        assert UNK not in vocab.encode(s.caption)
    assert dataset_stats(data) == dataset_stats(generate_dataset(config, 60))
    assert set(build_vocabulary(data).tokens) <= set(vocab.tokens)


def test_config_validation():
    with pytest.raises(VocabularyOverflowError):
        GeneratorConfig(n_event_types=25)
    with pytest.raises(ValueError):
        GeneratorConfig(causal_edge_prob=1.5)
    with pytest.raises(ValueError):
        GeneratorConfig(frames_per_event=(2, 1))
    with pytest.raises(ValueError):
        generate_dataset(GeneratorConfig(), 0)


def test_round_trip_is_lossless(tmp_path):
    data = generate_dataset(GeneratorConfig(seed=9), 100)
    write_dataset(data, tmp_path / "d.jsonl")
    assert read_dataset(tmp_path / "d.jsonl") == data


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 3.0), st.floats(0.0, 1.0))
def test_round_trip_property(tmp_path_factory, seed, sigma, prob):
    data = generate_dataset(GeneratorConfig(seed=seed, feature_noise_sigma=sigma, causal_edge_prob=prob), 5)
    path = tmp_path_factory.mktemp("rt") / "d.jsonl"
    write_dataset(data, path)
    assert read_dataset(path) == data


def test_truncated_file_names_the_line(tmp_path):
    data = generate_dataset(GeneratorConfig(), 3)
    write_dataset(data, tmp_path / "d.jsonl")
    text = (tmp_path / "d.jsonl").read_text()
    (tmp_path / "t.jsonl").write_text(text[: len(text) - 40])
    with pytest.raises(DatasetFormatError, match="line 3"):
        read_dataset(tmp_path / "t.jsonl")


def test_feature_dimension_mismatch_is_a_schema_error(tmp_path):
    a = generate_dataset(GeneratorConfig(d_v=4), 2)
    b = generate_dataset(GeneratorConfig(d_v=5), 1)
    write_dataset(a + b, tmp_path / "d.jsonl")
    with pytest.raises(DatasetSchemaError, match="line 3"):
        read_dataset(tmp_path / "d.jsonl")


def test_malformed_records(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"frames": [[1.0]], "caption": ["<bos>", "<eos>"], "causal_edges": [], "event_ids": [0]}\n'
                   '{"frames": [[1.0]], "caption": ["roll"], "causal_edges": [], "event_ids": [0]}\n')
    with pytest.raises(DatasetFormatError, match="line 2"):
        read_dataset(bad)
    bad.write_text('{"frames": [[1.0]]}\n')
    with pytest.raises(DatasetFormatError, match="missing fields"):
        read_dataset(bad)


def test_hand_written_fixture_parses(fixtures_dir):
    (s,) = read_dataset(fixtures_dir / "one_sample.jsonl")
    expected = VideoSample(np.array([[0.5, -1.0, 2.0], [0.25, 0.0, -3.5], [1e-3, 4.0, 0.0]]),
                           ("<bos>", "fall", "then", "break", "then", "spill", "because", "fall", "so",
                            "spill", "<eos>"),
                           ((0, 1), (1, 2), (0, 2)), (0, 1, 2))
    assert s == expected
    assert s.event_sequence() == ["fall", "break", "spill"]
    assert s.has_nonchain_edge()
    np.testing.assert_array_equal(s.annotation.cause_distribution()[2], [0.5, 0.5, 0.0])
