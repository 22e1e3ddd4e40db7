use pushrec::config::Config;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    match args[1].as_str() {
        "rsr" => {
            let state = pushrec::checkpoint::load(std::path::Path::new(&args[2])).unwrap();
            let ctx = pushrec::eval::EvalContext::new(
                state.params.clone(),
                state.norm.clone(),
                state.config.env.clone(),
                state.config.reward.clone(),
                state.tau,
            );
            let t = pushrec::eval::force_sweep(&ctx, &[5.0], 100, 31337).unwrap();
            println!("RSR@5N: {} (n {})", t.rows[0].rsr, t.rows[0].n);
            let base_ctx = pushrec::eval::EvalContext::new(
                pushrec::policy::PolicyParams::<f32>::init(&state.config.net, state.config.run.seed),
                pushrec::features::RunningNorm::new(state.config.net.frame_dim),
                state.config.env.clone(),
                state.config.reward.clone(),
                state.config.net.tau_start,
            );
            let baseline = pushrec::eval::measure_mean_return(&base_ctx, 100, 424242);
            let trained = pushrec::eval::measure_mean_return(&ctx, 100, 424242);
            println!("baseline {baseline:.1} trained {trained:.1} (3x baseline = {:.1})", 3.0 * baseline);
        }
        "seedexp" => {
            let seed: u64 = args[2].parse().unwrap();
            let cfg = Config::parse(&format!(
                "[ppo]\ntotal_steps = 40000\n[run]\nseed = {seed}\ncheckpoint_interval = 10000\n"
            ))
            .unwrap();
            let dir = std::path::PathBuf::from(format!("/tmp/seedexp_{seed}"));
            let _ = std::fs::remove_dir_all(&dir);
            match pushrec::learn::train(&cfg, &dir) {
                Ok(r) => println!("seed {seed}: usage {:?} return {:.1}", r.final_usage, r.final_mean_return),
                Err(e) => println!("seed {seed}: ERROR {e}"),
            }
        }
        _ => panic!("unknown probe"),
    }
}
