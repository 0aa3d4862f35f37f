//! Generates one trajectory per system, writes it to a temporary file and
//! reads it back.

use wavelit::objectives::rapsd;
use wavelit::synthdata::{generate, System, Trajectory, TrajectorySpec};

fn main() -> wavelit::Result<()> {
    let dir = std::env::temp_dir().join("wavelit-synth-example");
    std::fs::create_dir_all(&dir)?;
    for system in [System::Heat2d, System::Advection2d, System::GrayScott2d] {
        let spec = TrajectorySpec::new(system, 32, 16, 3);
        let tr = generate(&spec)?;
        let path = dir.join(format!("{system}.traj"));
        tr.write(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        let back = Trajectory::read(std::io::BufReader::new(std::fs::File::open(&path)?))?;
        assert_eq!(back.frames, tr.frames);
        let first = tr.frame(0);
        let last = tr.frame(tr.len() - 1);
        let hi = |f: &wavelit::Tensor| -> wavelit::Result<f64> {
            let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
            let ch0 = wavelit::Tensor::from_fn(&[h, w], |i| f.data()[i * c]);
            let p = rapsd(&ch0)?;
            Ok(p.power[p.power.len() / 2..].iter().sum())
        };
        println!(
            "{:<13} {} bytes  max|x| {:.3} -> {:.3}  high-band power {:.3e} -> {:.3e}",
            system.to_string(),
            std::fs::metadata(&path)?.len(),
            first.max_abs(),
            last.max_abs(),
            hi(&first)?,
            hi(&last)?
        );
    }
    Ok(())
}
