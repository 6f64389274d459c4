use spiral_encoder::block::BlockConfig;
use spiral_encoder::encoder::{EncoderWeights, ModelDims};
use spiral_encoder::engine::{run_utterance, StreamingEncoder};
use spiral_encoder::schedule::SpiralConfig;
use spiral_encoder::sim::{generate, GenerateSpec};

#[test]
fn frame_by_frame_streaming_matches_offline_run() {
    let mut spec = GenerateSpec::new(11, 1, 1000, 16, 8);
    spec.layers = 12;
    let ds = generate(&spec).unwrap();
    let x = &ds.features[0].1;
    let bcfg = BlockConfig::new(30, 2, 8);
    let scfg = SpiralConfig::spiral(12, 4);
    let offline = run_utterance(x, &bcfg, &scfg, &ds.weights, false).unwrap();

    let mut enc = StreamingEncoder::new(bcfg, scfg, &ds.weights).unwrap();
    let mut streamed = Vec::new();
    for r in 0..x.rows() {
        streamed.extend(enc.push(x.row(r)).unwrap());
    }
    streamed.extend(enc.finish().unwrap());
    assert_eq!(streamed, offline.blocks);
    assert_eq!(streamed.iter().map(|b| b.chunk.rows()).sum::<usize>(), 1000);
}

#[test]
fn streaming_rejects_mismatched_weights() {
    let w = EncoderWeights::random(ModelDims { layers: 6, dim: 8, ff_dim: 16, heads: 2, vocab: 4 }, 0);
    assert!(StreamingEncoder::new(BlockConfig::new(4, 2, 2), SpiralConfig::spiral(12, 4), &w)
        .and_then(|mut e| {
            for _ in 0..8 {
                e.push(&[0.0; 8])?;
            }
            e.finish()
        })
        .is_err());
}
