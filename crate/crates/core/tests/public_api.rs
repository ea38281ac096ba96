use onebit_core::wire::compressed_len;
use onebit_core::{
    compress_with_error_feedback, decompress, onebit_compress, BufferRole, DenseVector, ErrorBuffer, Topology,
    WireMessage,
};
use proptest::prelude::*;

fn vector(max_dim: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1e3f32..1e3, 1..max_dim)
}

proptest! {
    #[test]
    fn compressed_messages_survive_the_wire(values in vector(300), scatter in any::<bool>()) {
        let ct = onebit_compress(&DenseVector::new(values.clone()).unwrap());
        let msg = if scatter { WireMessage::Scatter(ct) } else { WireMessage::Gather(ct) };
        let bytes = msg.encode();
        prop_assert_eq!(bytes.len(), compressed_len(values.len()));
        prop_assert_eq!(WireMessage::decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn raw_messages_survive_the_wire(values in vector(300)) {
        let msg = WireMessage::FpRaw(DenseVector::new(values).unwrap());
        prop_assert_eq!(WireMessage::decode(&msg.encode()).unwrap(), msg);
    }

    #[test]
    fn feedback_residual_accounts_for_what_was_dropped(a in vector(64), seed in any::<u64>()) {
        let d = a.len();
        let b: Vec<f32> = a.iter().enumerate().map(|(i, x)| x * 0.5 - (seed.wrapping_add(i as u64) % 7) as f32).collect();
        let mut buf = ErrorBuffer::new(d, BufferRole::Worker);
        let mut sent = vec![0f64; d];
        for v in [&a, &b, &a] {
            let ct = compress_with_error_feedback(&DenseVector::new(v.clone()).unwrap(), &mut buf, 1.0).unwrap();
            for (s, x) in sent.iter_mut().zip(decompress(&ct).as_slice()) {
                *s += f64::from(*x);
            }
        }
        // what was sent plus what is still held equals what was offered
        for i in 0..d {
            let offered = 2.0 * f64::from(a[i]) + f64::from(b[i]);
            let held = f64::from(buf.delta().as_slice()[i]);
            prop_assert!((sent[i] + held - offered).abs() <= 1e-3 * (1.0 + offered.abs()));
        }
    }

    #[test]
    fn chunks_partition_every_dimension(workers in 1usize..12, dim in 1usize..500) {
        let t = Topology::new(workers, dim).unwrap();
        let mut next = 0;
        for w in 0..workers {
            let r = t.chunk(w);
            prop_assert_eq!(r.start, next.min(dim));
            next = r.end;
        }
        prop_assert_eq!(next, dim);
    }
}

#[test]
fn gather_encoding_example() {
    let ct = onebit_compress(&DenseVector::new(vec![1.5, -1.0, 0.0]).unwrap());
    let bytes = WireMessage::Gather(ct).encode();
    assert_eq!(bytes, [0x01, 0x03, 0x00, 0x00, 0x00, 0x04, 0x3a, 0x85, 0x3f, 0xa0]);
}
