use m2fcn::data::{synth_dataset, SynthParams};
use m2fcn::network::{M2fcn, NetworkConfig, RecursiveActivation, RecursiveInputs};
use m2fcn::objective::total_loss;
use m2fcn::subnet::SubNetConfig;
use m2fcn::{Graph, Tensor};

fn sample(seed: u64) -> m2fcn::data::Sample {
    synth_dataset(&SynthParams::new(32, 32, 3, 1.0), seed, 1)
        .unwrap()
        .remove(0)
}

fn randomize_heads(net: &mut M2fcn, value: f64) {
    let ids: Vec<_> = net
        .params()
        .iter()
        .filter(|(_, e)| e.name.contains("head"))
        .map(|(id, _)| id)
        .collect();
    for (k, id) in ids.into_iter().enumerate() {
        for (j, v) in net
            .params_mut()
            .entry_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .enumerate()
        {
            *v = value * if (k + j) % 2 == 0 { 1.0 } else { -0.5 };
        }
    }
}

#[test]
fn later_stage_losses_reach_the_first_trunk() {
    // With every stage-1 loss switched off, stage-1 trunk gradients can only
    // arrive through the recursive inputs of stage 2.
    let mut cfg = NetworkConfig::new(2, SubNetConfig::toy(1));
    cfg.alpha_side[0] = vec![0.0; 3];
    cfg.alpha_fuse[0] = 0.0;
    let mut net = M2fcn::new(&cfg, 4).unwrap();
    randomize_heads(&mut net, 0.3);
    let s = sample(1);
    let mut g = Graph::new();
    let outs = net.forward_all(&mut g, &s.image).unwrap();
    let terms = total_loss(&mut g, &outs, &s.labels, &cfg).unwrap();
    let grads = g.backward(terms.total).unwrap();
    let trunk = net
        .params()
        .find("stage1.level1.conv1.weight")
        .expect("trunk weight");
    let norm = grads.get(trunk).map_or(0.0, Tensor::max_abs);
    assert!(norm > 0.0, "stage-1 trunk gradient vanished");
}

#[test]
fn stage_inputs_follow_recursive_mode() {
    let s = sample(2);
    for (mode, channels) in [(RecursiveInputs::All, 4), (RecursiveInputs::Single(3), 2)] {
        let mut cfg = NetworkConfig::new(3, SubNetConfig::toy(1));
        cfg.recursive = mode;
        assert_eq!(cfg.stage_input_channels(1), channels);
        let net = M2fcn::new(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let outs = net.forward_all(&mut g, &s.image).unwrap();
        assert_eq!(outs.map_count(), 3 * 3 + 3);
        let p = net.predict(&s.image).unwrap();
        assert_eq!(p.shape(), &[1, 32, 32]);
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn checkpoints_round_trip_every_option() {
    let mut cfg = NetworkConfig::new(2, SubNetConfig::toy(1));
    cfg.recursive = RecursiveInputs::Single(2);
    cfg.recursive_activation = RecursiveActivation::Logit;
    cfg.learn_upsample = true;
    cfg.alpha_side[1] = vec![0.25, 0.5, 2.0];
    let net = M2fcn::new(&cfg, 9).unwrap();
    let bytes = net.to_bytes();
    let back = M2fcn::load(bytes.as_slice()).unwrap();
    assert_eq!(back, net);
    assert_eq!(back.to_bytes(), bytes);

    let mut truncated = bytes.clone();
    truncated.truncate(bytes.len() - 3);
    assert!(M2fcn::load(truncated.as_slice()).is_err());
    let mut bad_magic = bytes;
    bad_magic[0] ^= 0xff;
    assert!(M2fcn::load(bad_magic.as_slice()).is_err());
}

#[test]
fn wrong_image_channels_are_rejected() {
    let net = M2fcn::new(&NetworkConfig::toy(), 0).unwrap();
    assert!(net.predict(&Tensor::zeros(&[2, 16, 16])).is_err());
}
