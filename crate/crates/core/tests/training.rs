use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sivi::autodiff::Tensor;
use sivi::proposal::ProposalModel;
use sivi::sivi::SiviModel;
use sivi::targets::{Banana, DiagonalGaussian};
use sivi::training::{train, Checkpoint, LrSchedule, Method, TrainSettings};

fn models(seed: u64) -> (SiviModel, ProposalModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = SiviModel::new(3, 16, 2, 2, &mut rng);
    let proposal = ProposalModel::new(2, 3, 16, 2, 0.5, &mut rng).unwrap();
    (model, proposal)
}

fn snapshot(tensors: Vec<&Tensor>) -> Vec<Vec<f64>> {
    tensors.iter().map(|t| t.data().to_vec()).collect()
}

#[test]
fn model_steps_leave_the_proposal_untouched() {
    let (model, proposal) = models(1);
    let before = snapshot(proposal.tensors());
    for method in [Method::KpgIs, Method::KpgIsShared] {
        let mut s = TrainSettings::new(method, 40, 32, 5);
        s.inner = 4;
        s.warmup = 0;
        s.proposal_schedule = LrSchedule::constant(0.0);
        let run = train(model.clone(), Some(proposal.clone()), &Banana::new(), &s, |_| Ok(())).unwrap();
        assert_eq!(snapshot(run.proposal.as_ref().unwrap().tensors()), before, "{method}");
        assert_ne!(snapshot(run.model.tensors()), snapshot(model.tensors()), "{method}");
    }
}

#[test]
fn proposal_steps_leave_the_model_untouched() {
    let (model, proposal) = models(2);
    let before = snapshot(model.tensors());
    for method in [Method::KpgIs, Method::KpgIsShared] {
        let mut s = TrainSettings::new(method, 40, 32, 5);
        s.inner = 4;
        s.warmup = 0;
        s.schedule = LrSchedule::constant(0.0);
        let run = train(model.clone(), Some(proposal.clone()), &Banana::new(), &s, |_| Ok(())).unwrap();
        assert_eq!(snapshot(run.model.tensors()), before, "{method}");
        assert_ne!(snapshot(run.proposal.unwrap().tensors()), snapshot(proposal.tensors()));
    }
}

#[test]
fn checkpoints_on_disk_restore_the_run_state() {
    let dir = tempfile::tempdir().unwrap();
    let (model, proposal) = models(3);
    let mut s = TrainSettings::new(Method::KpgIs, 30, 16, 9);
    s.inner = 4;
    s.warmup = 10;
    s.checkpoint_every = 10;
    let mut written = Vec::new();
    let run = train(model, Some(proposal), &Banana::new(), &s, |c| {
        let path = dir.path().join(format!("{}.ckpt", written.len()));
        c.write(&path)?;
        written.push(path);
        Ok(())
    })
    .unwrap();
    assert_eq!(written.len(), 3);
    let last = Checkpoint::read(written.last().unwrap()).unwrap();
    assert_eq!(snapshot(last.model().unwrap().tensors()), snapshot(run.model.tensors()));
    assert_eq!(
        snapshot(last.proposal().unwrap().unwrap().tensors()),
        snapshot(run.proposal.unwrap().tensors())
    );
}

#[test]
fn every_method_reduces_the_gap_to_a_gaussian() {
    // Starting far from N(3, I), a short run should move the sample mean most of the way.
    let target = DiagonalGaussian {
        mean: vec![3.0, 3.0],
        std: vec![1.0, 1.0],
    };
    for method in Method::ALL {
        let (model, proposal) = models(4);
        let mut s = TrainSettings::new(method, 600, 64, 11);
        s.inner = 8;
        s.warmup = 100;
        s.schedule = LrSchedule::constant(1e-2);
        let run = train(model, Some(proposal), &target, &s, |_| Ok(())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = sivi::eval::draw_samples(&run.model, 4000, &mut rng).unwrap();
        let mean = sivi::eval::Moments::of(&z).mean;
        for m in mean {
            assert!((m - 3.0).abs() < 0.5, "{method}: {m}");
        }
    }
}
