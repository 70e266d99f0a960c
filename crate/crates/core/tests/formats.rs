use std::io::Cursor;

use pim_core::features::{parse_layout, FeatureStack};
use pim_core::media::{
    load_pgm, load_y4m, read_dqp, read_tensor, save_pgm, save_y4m, write_dqp, write_tensor, ChromaSubsampling,
    DqpSidecar, FeatureTensor, Frame, ImportanceMap, VideoSequence,
};
use pim_core::pimm::{load_weights, save_weights, ModelWeights};
use pim_core::Error;
use proptest::prelude::*;

fn video_strategy() -> impl Strategy<Value = VideoSequence> {
    (1usize..40, 1usize..30, 1usize..4, prop::bool::ANY, 1u32..60_000, 1u32..1002).prop_flat_map(
        |(w, h, n, full_chroma, num, den)| {
            let sub = if full_chroma { ChromaSubsampling::Yuv444 } else { ChromaSubsampling::Yuv420 };
            let (cw, ch) = sub.chroma_dims(w, h);
            let frame = (
                prop::collection::vec(any::<u8>(), w * h),
                prop::collection::vec(any::<u8>(), cw * ch),
                prop::collection::vec(any::<u8>(), cw * ch),
            )
                .prop_map(move |(y, u, v)| Frame::new(w, h, sub, [y, u, v]).unwrap());
            prop::collection::vec(frame, n).prop_map(move |f| VideoSequence::new(f, num, den).unwrap())
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn y4m_roundtrip(video in video_strategy()) {
        let mut bytes = Vec::new();
        save_y4m(&video, &mut bytes).unwrap();
        let back = load_y4m(Cursor::new(&bytes)).unwrap();
        prop_assert_eq!(&back, &video);
        let mut again = Vec::new();
        save_y4m(&back, &mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn y4m_truncation_is_an_error(video in video_strategy(), cut in 1usize..50) {
        let mut bytes = Vec::new();
        save_y4m(&video, &mut bytes).unwrap();
        // Cutting a whole frame record leaves a valid, shorter file.
        let record = b"FRAME\n".len() + video.frames()[0].payload_len();
        if video.len() > 1 {
            let shorter = load_y4m(Cursor::new(&bytes[..bytes.len() - record])).unwrap();
            prop_assert_eq!(shorter.frames(), &video.frames()[..video.len() - 1]);
        }
        let cut = 1 + (cut - 1) % (record - 1);
        bytes.truncate(bytes.len() - cut);
        prop_assert!(load_y4m(Cursor::new(&bytes)).is_err());
    }

    #[test]
    fn pgm_roundtrip(w in 1usize..64, h in 1usize..64, seed in any::<u8>()) {
        let values = (0..w * h).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let map = ImportanceMap::new(w, h, values).unwrap();
        let mut bytes = Vec::new();
        save_pgm(&map, &mut bytes).unwrap();
        let back = load_pgm(Cursor::new(&bytes)).unwrap();
        prop_assert_eq!(&back, &map);
        let mut again = Vec::new();
        save_pgm(&back, &mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn tensor_roundtrip(rows in 1usize..8, cols in 1usize..8, ch in 1usize..6, bits in prop::collection::vec(any::<u32>(), 400)) {
        // Arbitrary finite bit patterns (subnormals, -0.0) must survive untouched.
        let data: Vec<f32> = bits
            .iter()
            .map(|&b| f32::from_bits(b))
            .filter(|v| v.is_finite())
            .cycle()
            .take(rows * cols * ch)
            .collect();
        let t = FeatureTensor::new(rows, cols, ch, data).unwrap();
        let mut bytes = Vec::new();
        write_tensor(&t, &mut bytes).unwrap();
        let back = read_tensor(Cursor::new(&bytes)).unwrap();
        let mut again = Vec::new();
        write_tensor(&back, &mut again).unwrap();
        prop_assert_eq!(again, bytes);
        prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn dqp_roundtrip(frames in 1usize..4, rows in 1usize..10, cols in 1usize..10, seed in any::<u64>()) {
        let n = frames * rows * cols;
        let values = (0..n).map(|i| ((seed.wrapping_add(i as u64 * 7919)) % 21) as i8 - 10).collect();
        let s = DqpSidecar::new(frames, rows, cols, values).unwrap();
        let mut bytes = Vec::new();
        write_dqp(&s, &mut bytes).unwrap();
        prop_assert_eq!(bytes.len(), 16 + n);
        let back = read_dqp(Cursor::new(&bytes)).unwrap();
        prop_assert_eq!(&back, &s);
        let mut again = Vec::new();
        write_dqp(&back, &mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn weights_roundtrip(c in 1usize..12, seed in any::<u64>()) {
        let w = ModelWeights::init(c, seed).unwrap();
        let mut bytes = Vec::new();
        save_weights(&w, &mut bytes).unwrap();
        let back = load_weights(Cursor::new(&bytes), Some(c)).unwrap();
        let mut again = Vec::new();
        save_weights(&back, &mut again).unwrap();
        prop_assert_eq!(again, bytes);
        prop_assert_eq!(back.trainable_count(), w.trainable_count());
    }
}

#[test]
fn y4m_header_errors() {
    let frame = |n: usize| {
        let mut v = b"FRAME\n".to_vec();
        v.extend(vec![0u8; n]);
        v
    };
    let with = |header: &str, payload: Vec<u8>| {
        let mut v = format!("{header}\n").into_bytes();
        v.extend(payload);
        load_y4m(Cursor::new(v))
    };
    assert!(matches!(with("YUV4MPEG2 W4 H2 F25:1 C422", frame(16)), Err(Error::UnsupportedColorSpace(_))));
    assert!(matches!(with("YUV4MPEG2 W4 H2 C420", frame(12)), Err(Error::MalformedHeader(_))));
    assert!(matches!(with("YUV4MPEG W4 H2 F25:1", frame(12)), Err(Error::MalformedHeader(_))));
    assert!(matches!(with("YUV4MPEG2 W4 H2 F25:1", frame(11)), Err(Error::Truncated(_))));
    let ok = with("YUV4MPEG2 W4 H2 F30000:1001 Ip A0:0 C420jpeg XYSCSS=420JPEG", frame(12)).unwrap();
    assert_eq!(ok.fps_ratio(), (30000, 1001));
    assert_eq!(ok.len(), 1);
}

#[test]
fn pgm_errors() {
    let load = |b: &[u8]| load_pgm(Cursor::new(b.to_vec()));
    assert!(matches!(load(b"P5 2 2 65535\n\0\0\0\0\0\0\0\0"), Err(Error::UnsupportedMaxval(65535))));
    assert!(matches!(load(b"P2 2 2 255\n1 2 3 4"), Err(Error::MalformedHeader(_))));
    assert!(matches!(load(b"P5 2 2 255\n\x01\x02\x03"), Err(Error::Truncated(_))));
    assert!(matches!(load(b"P5 2 2 255\n\x01\x02\x03\x04\x05"), Err(Error::PayloadSize(_))));
    let commented = load(b"P5\n# painted\n2 1\n# max\n255\n\x07\x09").unwrap();
    assert_eq!(commented.values(), &[7, 9]);
}

#[test]
fn binary_container_errors() {
    let mut t = Vec::new();
    write_tensor(&FeatureTensor::new(1, 1, 2, vec![1.0, 2.0]).unwrap(), &mut t).unwrap();
    let mut bad = t.clone();
    bad[..4].copy_from_slice(b"FT02");
    assert!(matches!(read_tensor(Cursor::new(&bad)), Err(Error::BadMagic { .. })));
    assert!(matches!(read_tensor(Cursor::new(&t[..t.len() - 1])), Err(Error::PayloadSize(_))));
    let mut long = t.clone();
    long.push(0);
    assert!(matches!(read_tensor(Cursor::new(&long)), Err(Error::PayloadSize(_))));
    assert!(matches!(read_tensor(Cursor::new(&t[..10])), Err(Error::Truncated(_))));

    let mut d = Vec::new();
    write_dqp(&DqpSidecar::new(1, 1, 2, vec![-10, 10]).unwrap(), &mut d).unwrap();
    let mut out_of_range = d.clone();
    out_of_range[17] = 11;
    assert!(matches!(read_dqp(Cursor::new(&out_of_range)), Err(Error::DqpOutOfRange(11))));
    assert!(matches!(read_dqp(Cursor::new(&t)), Err(Error::BadMagic { .. })));

    let w = ModelWeights::init(4, 0).unwrap();
    let mut bytes = Vec::new();
    save_weights(&w, &mut bytes).unwrap();
    assert!(matches!(load_weights(Cursor::new(&bytes), Some(5)), Err(Error::ChannelMismatch { expected: 5, found: 4 })));
    bytes[0] = b'X';
    assert!(matches!(load_weights(Cursor::new(&bytes), None), Err(Error::BadMagic { .. })));
}

#[test]
fn stack_layout_roundtrip() {
    let layout = vec![("frame".to_string(), 3), ("saliency".to_string(), 1)];
    let data: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.5).collect();
    let stack = FeatureStack::new(2, 3, layout.clone(), data).unwrap();
    assert_eq!(parse_layout(&stack.layout_text()).unwrap(), layout);
    let back = FeatureStack::from_tensor(&stack.to_tensor().unwrap(), layout).unwrap();
    assert_eq!(back, stack);
    assert!(FeatureStack::from_tensor(&stack.to_tensor().unwrap(), vec![("frame".into(), 3)]).is_err());
}
