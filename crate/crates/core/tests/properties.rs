use acom::coding::{
    build_huffman, build_smoothed_huffman, decode_stream, empirical_entropy, encode_stream, CodeHistogram,
    CodingMode,
};
use acom::model::{time_avg_pool, LayerSpec};
use acom::pipeline::{deserialize_frame, serialize_frame, FrameCodec, Message};
use acom::rvq::{vq_losses, Codebook, TokenFrame};
use acom::FeatureSequence;
use proptest::prelude::*;

fn codebook_strategy() -> impl Strategy<Value = Codebook<f32>> {
    (1usize..6, 1usize..20, 1usize..4).prop_flat_map(|(d, v, k)| {
        prop::collection::vec(-4.0f32..4.0, d * v * k)
            .prop_map(move |w| Codebook::from_codewords(d, v, k, w).unwrap())
    })
}

fn tokens_for(stages: usize, size: usize, max_frames: usize) -> impl Strategy<Value = Vec<TokenFrame>> {
    prop::collection::vec(prop::collection::vec(0..size as u32, stages).prop_map(TokenFrame::new), 0..max_frames)
}

proptest! {
    #[test]
    fn histogram_ignores_frame_order(mut tokens in tokens_for(3, 7, 60), seed in any::<u64>()) {
        let a = CodeHistogram::from_tokens(3, 7, &tokens).unwrap();
        let n = tokens.len().max(1);
        tokens.rotate_left((seed as usize) % n);
        tokens.reverse();
        let b = CodeHistogram::from_tokens(3, 7, &tokens).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn entropy_is_bounded(tokens in tokens_for(2, 9, 80)) {
        prop_assume!(!tokens.is_empty());
        let r = empirical_entropy(&CodeHistogram::from_tokens(2, 9, &tokens).unwrap()).unwrap();
        for h in &r.per_stage {
            prop_assert!(*h >= 0.0 && *h <= (9f64).log2() + 1e-12);
        }
    }

    #[test]
    fn huffman_is_prefix_free_and_bounded(counts in prop::collection::vec(0u64..1000, 1..200)) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let t = build_huffman(&counts).unwrap();
        prop_assert!(t.kraft_sum() <= 1.0 + 1e-12);
        let s = build_smoothed_huffman(&counts).unwrap();
        prop_assert!(s.lengths().iter().all(|&l| l > 0));
    }

    #[test]
    fn codebook_file_round_trip(cb in codebook_strategy()) {
        let back = Codebook::from_bytes(&cb.to_bytes()).unwrap();
        prop_assert_eq!(back.codewords(), cb.codewords());
        prop_assert_eq!(back.hash(), cb.hash());
    }

    #[test]
    fn bitstream_round_trip(cb in codebook_strategy(), frames in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 8), 0..40), huffman in any::<bool>()) {
        let tokens: Vec<TokenFrame> = frames.iter().map(|f| cb.quantize(&f[..cb.dim()]).unwrap().tokens).collect();
        let mode = if huffman && !tokens.is_empty() { CodingMode::Huffman } else { CodingMode::Raw };
        let bytes = encode_stream(&tokens, &cb, 25.0, mode).unwrap().to_bytes();
        let (header, back) = decode_stream(&bytes, &cb).unwrap();
        prop_assert_eq!(back, tokens);
        prop_assert_eq!(header.codebook_hash, cb.hash());
    }

    #[test]
    fn quantization_is_deterministic_and_matches_dequantize(cb in codebook_strategy(), h in prop::collection::vec(-5.0f32..5.0, 8)) {
        let h = &h[..cb.dim()];
        let a = cb.quantize(h).unwrap();
        let b = cb.quantize(h).unwrap();
        prop_assert_eq!(&a.tokens, &b.tokens);
        prop_assert_eq!(cb.dequantize(&a.tokens).unwrap(), a.reconstruction.clone());
        let last = *a.residual_norms.last().unwrap();
        let direct: f32 = h.iter().zip(&a.reconstruction).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt();
        prop_assert!((last - direct).abs() <= 1e-5 * direct.max(1.0));
    }

    #[test]
    fn vq_losses_ignore_codeword_relabelling(cb in codebook_strategy(), h in prop::collection::vec(-5.0f32..5.0, 8), shift in 0usize..19) {
        let h = &h[..cb.dim()];
        let (d, v, k) = (cb.dim(), cb.size(), cb.stages());
        let mut words = Vec::with_capacity(cb.codewords().len());
        for stage in 0..k {
            for i in 0..v {
                words.extend_from_slice(cb.codeword(stage, (i + shift) % v));
            }
        }
        let permuted = Codebook::from_codewords(d, v, k, words).unwrap();
        let a = cb.quantize(h).unwrap();
        let b = permuted.quantize(h).unwrap();
        prop_assert_eq!(a.reconstruction.clone(), b.reconstruction.clone());
        prop_assert_eq!(a.code_loss, b.code_loss);
        let (code, commit) = vq_losses(h, &a.reconstruction).unwrap();
        prop_assert_eq!(code, commit);
    }

    #[test]
    fn frame_messages_round_trip(stages in 1usize..6, size in 1usize..5000, seq in any::<u32>(), raw in prop::collection::vec(any::<u32>(), 6)) {
        let codec = FrameCodec::raw(stages, size);
        let t = TokenFrame::new(raw[..stages].iter().map(|r| r % size as u32).collect());
        let bytes = serialize_frame(seq, &t, &codec).unwrap();
        prop_assert_eq!(deserialize_frame(&bytes, &codec).unwrap(), (seq, t));
    }

    #[test]
    fn message_stream_parsing_is_unique(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..8), cut in 0usize..64) {
        let msgs = vec![Message::Ack, Message::Result(values), Message::End];
        let bytes: Vec<u8> = msgs.iter().flat_map(Message::to_bytes).collect();
        prop_assert_eq!(Message::parse_all(&bytes).unwrap(), msgs);
        if cut < bytes.len() && cut != 5 {
            let prefix = &bytes[..cut];
            let parsed = Message::parse_all(prefix);
            let boundary = [0, 5, bytes.len() - 5].contains(&cut);
            prop_assert_eq!(parsed.is_ok(), boundary);
        }
    }

    #[test]
    fn pooling_preserves_length_rule(frames in 0usize..50, factor in 1usize..9) {
        let x = FeatureSequence::<f32>::from_vec(2, (0..frames * 2).map(|i| i as f32).collect()).unwrap();
        let y = time_avg_pool(&x, factor).unwrap();
        prop_assert_eq!(y.len(), frames.div_ceil(factor));
        let spec = LayerSpec::TimeAvgPool { factor };
        prop_assert_eq!(spec.output_len(frames), y.len());
    }
}
