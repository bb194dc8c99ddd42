//! Small self-contained walkthroughs of the encryption layer and of one
//! secure aggregation round.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use dpfed_core::model::{LayerShape, ModelParams};
use dpfed_core::orchestrator::plain_average;
use dpfed_core::rng::{stream, Stream};
use dpfed_core::secure_agg::wire::encode_update;
use dpfed_core::secure_agg::{contains_secret_key, SecureAggConfig, SecureAggregator, TransportKind};
use dpfed_he::{Bfv, EncryptionParams};
use rand::Rng;

use crate::error::Result;

/// Generates a key pair, encrypts a random batch, decrypts it and reports
/// sizes and the remaining noise margin.
pub fn keygen_demo(params: EncryptionParams, seed: u64) -> Result<String> {
    let bfv = Bfv::new(params)?;
    let p = bfv.params();
    let mut rng = stream(seed, Stream::KeyGen);
    let t0 = Instant::now();
    let (sk, pk) = bfv.keygen(&mut rng);
    let keygen = t0.elapsed();
    let half = (p.plain_modulus() / 2) as i64;
    let mut data_rng = stream(seed, Stream::Encryption(0));
    let slots: Vec<i64> = (0..p.degree()).map(|_| data_rng.random_range(-half..=half)).collect();
    let pt = bfv.encoder().encode(&slots)?;
    let t1 = Instant::now();
    let ct = bfv.encrypt(&pt, &pk, &mut data_rng)?;
    let enc = t1.elapsed();
    let t2 = Instant::now();
    let back = bfv.encoder().decode(&bfv.decrypt(&ct, &sk)?);
    let dec = t2.elapsed();
    let noise = bfv.decryption_noise(&ct, &sk, &pt);
    let mut out = String::new();
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    writeln!(out, "degree d            {}", p.degree()).ok();
    writeln!(out, "plain modulus b     {}", p.plain_modulus()).ok();
    writeln!(out, "coeff modulus qc    {}", p.coeff_modulus()).ok();
    writeln!(out, "delta scale         {}", p.delta_scale()).ok();
    writeln!(out, "noise std           {}", p.noise_std()).ok();
    let fp: String = p.fingerprint().iter().map(|b| format!("{b:02x}")).collect();
    writeln!(out, "fingerprint         {fp}").ok();
    writeln!(out, "public key bytes    {}", pk.to_bytes().len()).ok();
    writeln!(out, "ciphertext bytes    {}", ct.to_bytes().len()).ok();
    writeln!(out, "keygen ms           {:.2}", ms(keygen)).ok();
    writeln!(out, "encrypt ms          {:.2}", ms(enc)).ok();
    writeln!(out, "decrypt ms          {:.2}", ms(dec)).ok();
    writeln!(out, "fresh noise         {noise} (fails at {})", p.delta_scale() / 4).ok();
    writeln!(out, "round trip exact    {}", back == slots).ok();
    Ok(out)
}

/// One secure aggregation round over `hospitals` random models of `len`
/// weights in `[-2, 2]`, compared against the plaintext average.
pub fn secure_agg_demo(hospitals: usize, len: usize, transport: TransportKind, seed: u64) -> Result<String> {
    let config = SecureAggConfig {
        transport,
        ..SecureAggConfig::default()
    };
    let params = config.params.clone();
    let t0 = Instant::now();
    let mut agg = SecureAggregator::new(hospitals, config, seed)?;
    let setup = t0.elapsed();
    let sk = agg.hospital_secret_key(0).cloned();
    let mut rng = stream(seed, Stream::Dataset);
    let shape = vec![LayerShape::new("weights", &[len])];
    let models: Vec<ModelParams> = (0..hospitals)
        .map(|_| ModelParams::new((0..len).map(|_| rng.random_range(-2.0..=2.0)).collect(), shape.clone()))
        .collect::<std::result::Result<_, _>>()?;
    agg.broadcast_initial(&models[0])?;
    let local: Vec<(usize, &ModelParams)> = models.iter().enumerate().collect();
    let t1 = Instant::now();
    let secure = agg.aggregate(&local)?;
    let round = t1.elapsed();
    let plain = plain_average(&models.iter().collect::<Vec<_>>())?;
    let gap = secure
        .values()
        .iter()
        .zip(plain.values())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let state = agg.server_state();
    let leaked = sk.is_some_and(|sk| contains_secret_key(&state.snapshot(), &sk, &params));
    let mut out = String::new();
    writeln!(out, "transport           {transport:?}").ok();
    writeln!(out, "hospitals           {hospitals}").ok();
    writeln!(out, "weights per model   {len}").ok();
    writeln!(out, "setup ms            {:.1}", setup.as_secs_f64() * 1e3).ok();
    writeln!(out, "round ms            {:.1}", round.as_secs_f64() * 1e3).ok();
    let upload: usize = state.received.values().map(|u| encode_update(u).len()).sum();
    let chunks = state.received.values().next().map_or(0, |u| u.num_chunks);
    writeln!(out, "ciphertexts/update  {chunks}").ok();
    writeln!(out, "uploaded bytes      {upload}").ok();
    writeln!(out, "max |secure - plain| {gap:.3e} (bound 5e-4)").ok();
    writeln!(out, "secret key on server {leaked}").ok();
    Ok(out)
}
