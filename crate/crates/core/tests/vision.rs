use avstage::nn::Tensor;
use avstage::vision::{unvoxelize, voxelize, PatchGeometry, VideoClip, VoxelGrid};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_clip(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, c: usize) -> VideoClip {
    let n = t * h * w * c;
    VideoClip::new(t, h, w, c, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn toy_geometry_gives_eight_tokens_of_512() {
    let clip = VideoClip::zeros(4, 32, 32, 1);
    let v = voxelize(&clip, &PatchGeometry::new(16, 16, 2)).unwrap();
    assert_eq!((v.n_tokens(), v.token_dim()), (8, 512));
}

#[test]
fn permuted_tokens_do_not_reconstruct_the_clip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let clip = random_clip(&mut rng, 4, 16, 16, 3);
    let v = voxelize(&clip, &PatchGeometry::new(8, 8, 2)).unwrap();
    let n = v.n_tokens();
    let mut order: Vec<usize> = (0..n).collect();
    while order.iter().enumerate().all(|(i, &j)| i == j) {
        order.shuffle(&mut rng);
    }
    let mut data = Vec::with_capacity(v.tokens.numel());
    for &j in &order {
        data.extend_from_slice(v.tokens.row(j));
    }
    let shuffled = VoxelGrid {
        tokens: Tensor::from_vec(&[n, v.token_dim()], data),
        ..v.clone()
    };
    assert_ne!(unvoxelize(&shuffled).unwrap(), clip);
    assert_eq!(unvoxelize(&v).unwrap(), clip);
}

proptest! {
    #[test]
    fn round_trip_is_exact(
        seed in any::<u64>(),
        (pt, gt) in (1usize..4, 1usize..4),
        (ph, gh) in (1usize..5, 1usize..4),
        (pw, gw) in (1usize..5, 1usize..4),
        c in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clip = random_clip(&mut rng, pt * gt, ph * gh, pw * gw, c);
        let g = PatchGeometry::new(ph, pw, pt);
        let v = voxelize(&clip, &g).unwrap();
        prop_assert_eq!(v.n_tokens(), gt * gh * gw);
        prop_assert_eq!(v.n_tokens() * v.token_dim(), clip.pixels.len());
        let back = unvoxelize(&v).unwrap();
        prop_assert!(back.pixels.iter().zip(&clip.pixels).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.dims(), clip.dims());
    }
}
