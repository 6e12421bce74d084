use culicid_core::denoise::{denoise, DenoiseConfig};
use culicid_core::image::{ImageTensor, Scale};
use rand::{Rng, SeedableRng};

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f32> = (0..299 * 299 * 3).map(|_| rng.random_range(0..=255) as f32).collect();
    let img = ImageTensor::new(299, 299, Scale::Byte, data).unwrap();
    let t = std::time::Instant::now();
    for _ in 0..3 {
        std::hint::black_box(denoise(&img, &DenoiseConfig::default()).unwrap());
    }
    println!("{:?} per image", t.elapsed() / 3);
}
