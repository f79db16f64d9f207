//! Finite-difference checks of the encoder blocks and the fusion heads, on
//! top of the layer-level suite of the network crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarnn::gradcheck::{self, check_module, random_tensor, GradReport};
use sarnn::{Mode, Tensor};

use crate::dscen::{BlockKind, CaBlock, CaBlockSpec, ConvBlock, Dscen, DscenSpec, MsgcBlockSpec};
use crate::fusion::{Activation, FusionModel, FusionSpec, Stream};

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error(transparent)]
    Nn(#[from] sarnn::NnError),
    #[error(transparent)]
    Dscen(#[from] crate::dscen::DscenError),
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
}

/// A small encoder that still exercises every block type.
pub fn tiny_dscen_spec() -> DscenSpec {
    DscenSpec {
        widths: vec![4, 8],
        groups: 2,
        dilation: 2,
        dropout: 0.2,
        patch: 8,
        reduction: 2,
        attention: true,
        block: BlockKind::Msgc,
    }
}

/// Lifts convolution weights from the small training init to unit scale.
/// Behind batch norm, a finite-difference step on 0.01-scale weights moves
/// the normalised activations far enough to cross pooling and ReLU kinks.
fn unit_scale_convs<M: sarnn::Module<f64>>(model: &mut M) {
    for p in model.params_mut() {
        if p.value.shape().len() == 4 {
            for v in p.value.data_mut() {
                *v *= 100.0;
            }
        }
    }
}

fn block_case(kind: BlockKind, seed: u64) -> Result<GradReport, SuiteError> {
    let spec = MsgcBlockSpec {
        in_channels: 2,
        out_channels: 4,
        groups: 2,
        dilation: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = ConvBlock::<f64>::new("block", spec, kind, &mut rng)?;
    unit_scale_convs(&mut block);
    let x = random_tensor(&[2, 2, 5, 5], seed + 1);
    Ok(check_module(
        &block,
        vec![x],
        seed + 2,
        |m, x| m.forward(&x[0], Mode::Train),
        |m, g| Ok(vec![m.backward(g)?]),
    )?)
}

fn attention_case(seed: u64) -> Result<GradReport, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = CaBlockSpec {
        channels: 4,
        reduction: 2,
    };
    let mut block = CaBlock::<f64>::new("ca", spec, &mut rng)?;
    // larger weights than the default init so the gate is far from 0.5
    for p in sarnn::Module::params_mut(&mut block) {
        for v in p.value.data_mut() {
            *v *= 50.0;
        }
    }
    let x = random_tensor(&[2, 4, 3, 3], seed + 1);
    Ok(check_module(
        &block,
        vec![x],
        seed + 2,
        |m, x| m.forward(&x[0]),
        |m, g| Ok(vec![m.backward(g)?]),
    )?)
}

fn encoder_case(seed: u64) -> Result<GradReport, SuiteError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Dscen::<f64>::new(tiny_dscen_spec(), &mut rng, seed)?;
    unit_scale_convs(&mut net);
    let x = random_tensor(&[3, 1, 8, 8], seed + 1);
    Ok(check_module(
        &net,
        vec![x],
        seed + 2,
        |m, x| m.forward(&x[0], Mode::Train),
        |m, g| Ok(vec![m.backward(g)?]),
    )?)
}

fn tiny_fusion_spec(activation: Activation) -> FusionSpec {
    FusionSpec {
        spatial_dim: 32,
        statistical_dim: 10,
        hidden: 4,
        groups: 2,
        classes: 3,
        activation,
    }
}

/// Gradients through the whole model: encoder, head and both inputs.
fn model_case(stream: Stream, activation: Activation, seed: u64) -> Result<GradReport, SuiteError> {
    let mut model = FusionModel::<f64>::new(stream, &tiny_dscen_spec(), tiny_fusion_spec(activation), seed)?;
    unit_scale_convs(&mut model);
    for p in sarnn::Module::params_mut(&mut model) {
        if p.name.starts_with("head") {
            for v in p.value.data_mut() {
                *v *= 30.0;
            }
        }
    }
    let patches = random_tensor(&[3, 1, 8, 8], seed + 1);
    let statistical = random_tensor(&[3, 10], seed + 2);
    let (sp, st) = (stream.uses_spatial(), stream.uses_statistical());
    let inputs = match (sp, st) {
        (true, true) => vec![patches, statistical],
        (true, false) => vec![patches],
        _ => vec![statistical],
    };
    let split = |x: &[Tensor<f64>]| -> (Option<Tensor<f64>>, Option<Tensor<f64>>) {
        match (sp, st) {
            (true, true) => (Some(x[0].clone()), Some(x[1].clone())),
            (true, false) => (Some(x[0].clone()), None),
            _ => (None, Some(x[0].clone())),
        }
    };
    Ok(check_module(
        &model,
        inputs,
        seed + 3,
        |m, x| {
            let (p, s) = split(x);
            m.forward(p.as_ref(), s.as_ref(), Mode::Train)
        },
        |m, g| {
            let grads = m.backward(g)?;
            Ok(grads.patches.into_iter().chain(grads.statistical).collect())
        },
    )?)
}

/// Encoder and head cases only.
pub fn model_suite() -> Result<Vec<(String, GradReport)>, SuiteError> {
    let mut out = vec![
        ("msgc block".to_string(), block_case(BlockKind::Msgc, 11)?),
        ("standard block".to_string(), block_case(BlockKind::Standard, 12)?),
        ("channel attention".to_string(), attention_case(13)?),
        ("encoder".to_string(), encoder_case(14)?),
    ];
    for (k, stream) in Stream::ALL.into_iter().enumerate() {
        out.push((format!("{stream} model"), model_case(stream, Activation::Sigmoid, 20 + k as u64)?));
    }
    out.push(("fusion model relu".to_string(), model_case(Stream::Fusion, Activation::Relu, 30)?));
    Ok(out)
}

/// Layer suite followed by the model suite.
pub fn full_suite() -> Result<Vec<(String, GradReport)>, SuiteError> {
    let mut out = gradcheck::nn_suite()?;
    out.extend(model_suite()?);
    Ok(out)
}
