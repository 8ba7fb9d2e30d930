//! Acceptance suite. Runs every criterion against the simulated cluster with
//! simulated time and prints one `criterion N: PASS|FAIL` line each.
//!
//! Pinned tolerances:
//! * criteria 1, 2, 3, 4, 5, 6, 7, 9: exact equality.
//! * criterion 8: |got - want| <= 1e-9 * max(|want|, 1).

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::time::Instant;

use base64::Engine;
use chrono::TimeDelta;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jobwatch_core::adapter::{AccountingRecord, CommandKind, JobStatus, SchedulerAdapter, SgeAdapter, SubmitSpec};
use jobwatch_core::analytics::{build_models, fit_line, parse_rules, Metric};
use jobwatch_core::connection::keystore::MIN_ITERATIONS;
use jobwatch_core::connection::{ConnectionError, ConnectionManager, CredentialStore, SimTransport, DEFAULT_TIMEOUT};
use jobwatch_core::gateway::{
    CacheKey, GatewayConfig, GatewayError, GatewayResponse, JobAction, LimiterConfig, RateLimiter, Served, Verdict,
};
use jobwatch_core::poller::PollConfig;
use jobwatch_core::sim::{SimCluster, SimConfig};
use jobwatch_core::stack::SimStack;
use jobwatch_core::store::{HistoryQuery, JobRecord, JobStore};
use jobwatch_core::{CommandLine, ManualClock};

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

fn sim_stack(dir: &tempfile::TempDir, sim: SimConfig, poll: PollConfig, users: &[&str]) -> Result<SimStack, String> {
    SimStack::new(sim, GatewayConfig::default(), poll, dir.path(), MIN_ITERATIONS, users).map_err(|e| e.to_string())
}

/// `HH:MM:SS` computed independently of the crate.
fn hms(secs: u64) -> String {
    format!("{:02}:{:02}:{:02}", secs / 3600, secs / 60 % 60, secs % 60)
}

fn status_text(s: JobStatus) -> &'static str {
    match s {
        JobStatus::Completed => "Completed",
        JobStatus::Error => "Error",
        JobStatus::Deleted => "Deleted",
        _ => "not terminal",
    }
}

fn qsub(sim: &mut SimCluster, user: &str, name: &str, rng: &mut ChaCha8Rng) -> Result<u64, String> {
    let mem = ["512M", "1G", "2G", "8G"].choose(rng).unwrap();
    let mut argv = vec!["qsub".to_string(), "-N".into(), name.into(), "-l".into(), format!("h_vmem={mem}")];
    if rng.random_bool(0.3) {
        argv.extend(["-pe".into(), "smp".into(), rng.random_range(2..=16u32).to_string()]);
    }
    argv.push("run.sh".into());
    let out = sim.handle_command(user, &CommandLine::from(argv));
    ensure!(out.is_success(), "qsub failed: {}", out.stderr);
    SgeAdapter::new().parse_submit(&out.stdout).map_err(|e| e.to_string())
}

// 1. Seeded scenario of at least 50 jobs run to quiescence; the archive's
//    terminal tuples equal the simulator's ledger.
async fn criterion_1() -> Outcome {
    let started = Instant::now();
    let dir = tempdir();
    let users = ["alice", "bob", "carol"];
    let sim = SimConfig {
        seed: 1909,
        accounting_lag: 2,
        failure_rate: 0.25,
        queue_delay: (1, 240),
        run_duration: (60, 900),
        ..SimConfig::default()
    };
    let poll = PollConfig {
        detail_batch_limit: 10,
        ..PollConfig::default()
    };
    let s = sim_stack(&dir, sim, poll, &users)?;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut owners: BTreeMap<u64, &str> = BTreeMap::new();
    for step in 0..30 {
        for k in 0..2 {
            let user = *users.choose(&mut rng).unwrap();
            let name = format!("job{step}_{k}");
            let id = if rng.random_bool(0.5) {
                let spec = SubmitSpec {
                    job_name: name.clone(),
                    script_path: format!("/home/{user}/{name}.sh"),
                    source_directory: format!("/home/{user}"),
                    memory_requested: "4G".into(),
                    cores: 1,
                    parallel: false,
                    output_path: None,
                    extra_args: vec![],
                };
                let served = s.request(user, JobAction::Submit(spec)).await.map_err(|e| e.to_string())?;
                match &**served.response() {
                    GatewayResponse::Submitted { job_id, .. } => *job_id,
                    other => return Err(format!("unexpected submit response {other:?}")),
                }
            } else {
                qsub(&mut s.sim.lock(), user, &name, &mut rng)?
            };
            owners.insert(id, user);
        }
        if step % 3 == 2 {
            let live: Vec<(u64, &str)> = {
                let sim = s.sim.lock();
                owners.iter().filter(|(id, _)| sim.job(**id).is_some_and(|j| j.is_live())).map(|(i, u)| (*i, *u)).collect()
            };
            if let Some((id, owner)) = live.choose(&mut rng) {
                s.request(owner, JobAction::Cancel { job_id: *id }).await.map_err(|e| e.to_string())?;
            }
        }
        s.advance(30);
        s.tick().await;
    }
    let ticks = s.run_to_quiescence(30, 5_000).await;
    ensure!(ticks.is_some(), "did not reach quiescence");
    ensure!(owners.len() >= 50, "only {} jobs", owners.len());

    let ledger = s.sim.lock().ledger();
    let truth: BTreeSet<(u64, String, String, u64)> = ledger
        .terminal_accounting()
        .iter()
        .map(|a| (a.job_id, status_text(a.final_status).to_string(), hms(a.final_run_time_secs), a.maximum_memory))
        .collect();
    let kinds: BTreeSet<&str> = truth.iter().map(|t| t.1.as_str()).collect();
    ensure!(
        kinds == BTreeSet::from(["Completed", "Error", "Deleted"]),
        "scenario is not mixed: {kinds:?}"
    );
    ensure!(truth.len() == owners.len(), "ledger has {} terminal jobs of {}", truth.len(), owners.len());
    let records = s.store().list_jobs(&HistoryQuery::all()).map_err(|e| e.to_string())?;
    let archived: BTreeSet<(u64, String, String, u64)> = records
        .iter()
        .filter(|r| r.is_final())
        .map(|r| (r.job_id, r.final_status.clone(), r.final_run_time.clone(), r.maximum_memory))
        .collect();
    ensure!(records.len() == archived.len(), "{} records still open", records.len() - archived.len());
    if archived != truth {
        let missing: Vec<_> = truth.difference(&archived).take(3).collect();
        let extra: Vec<_> = archived.difference(&truth).take(3).collect();
        return Err(format!("archive differs from ledger; missing {missing:?}, extra {extra:?}"));
    }
    let elapsed = started.elapsed();
    ensure!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    Ok(())
}

// 2. Every tick sends one listing and min(active, limit) detail queries.
async fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for (round, limit) in [1usize, 3, 5, 8].into_iter().enumerate() {
        let dir = tempdir();
        let sim = SimConfig {
            seed: round as u64,
            ..SimConfig::default()
        };
        let poll = PollConfig {
            detail_batch_limit: limit,
            ..PollConfig::default()
        };
        let s = sim_stack(&dir, sim, poll, &["alice"])?;
        for t in 0..25 {
            {
                let mut sim = s.sim.lock();
                for k in 0..rng.random_range(0..=4) {
                    let user = *["u1", "u2", "u3"].choose(&mut rng).unwrap();
                    qsub(&mut sim, user, &format!("r{round}t{t}k{k}"), &mut rng)?;
                }
                let live: Vec<(u64, String)> = sim.live_jobs().map(|j| (j.job_id, j.owner.clone())).collect();
                if let Some((id, owner)) = live.choose(&mut rng).filter(|_| rng.random_bool(0.2)) {
                    sim.handle_command(owner, &CommandLine::new(["qdel".to_string(), id.to_string()]));
                }
                sim.advance_clock(rng.random_range(0..=400));
            }
            let (active, seq): (BTreeSet<u64>, u64) = {
                let sim = s.sim.lock();
                (sim.live_jobs().map(|j| j.job_id).collect(), sim.next_seq())
            };
            let report = s.tick().await;
            let sim = s.sim.lock();
            let log = sim.log_since(seq);
            let lists = log.iter().filter(|e| e.kind() == Some(CommandKind::List)).count();
            let user_lists = log.iter().filter(|e| e.kind() == Some(CommandKind::ListForUser)).count();
            let details: Vec<u64> =
                log.iter().filter(|e| e.kind() == Some(CommandKind::Detail)).filter_map(|e| e.job_id()).collect();
            let distinct: BTreeSet<u64> = details.iter().copied().collect();
            ensure!(lists == 1 && user_lists == 0, "tick {round}/{t}: {lists} listings");
            ensure!(
                details.len() == active.len().min(limit),
                "tick {round}/{t}: {} details for {} active, limit {limit}",
                details.len(),
                active.len()
            );
            ensure!(distinct.len() == details.len() && distinct.is_subset(&active), "tick {round}/{t}: bad detail ids");
            ensure!(report.detail_queries_issued == details.len(), "report disagrees with command log");
            checked += 1;
        }
    }
    ensure!(checked == 100, "checked {checked} states");
    Ok(())
}

fn backoff_oracle(k: u32) -> TimeDelta {
    // base 1 s, cap 64 s, in whole milliseconds
    let ms = if k >= 8 { 64_000 } else { (1_000i64 << (k - 1)).min(64_000) };
    TimeDelta::milliseconds(ms)
}

// 3. A flood from one principal never puts more than 10 commands in any 10 s
//    window, and backoff follows base * 2^(k-1) capped.
async fn criterion_3() -> Outcome {
    let dir = tempdir();
    let s = sim_stack(&dir, SimConfig::default(), PollConfig::default(), &["alice"])?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..3 {
        qsub(&mut s.sim.lock(), "alice", &format!("flood{i}"), &mut rng)?;
    }
    let seq = s.sim.lock().next_seq();
    let mut sent = 0;
    let mut violations = 0;
    while sent < 1_000 {
        s.advance(rng.random_range(0..=2));
        for _ in 0..rng.random_range(1..=6) {
            let action = match rng.random_range(0..4) {
                0 => JobAction::Status {
                    user: Some("alice".into()),
                },
                1 => JobAction::Refresh { user: "alice".into() },
                2 => JobAction::StatusDetail { job_id: 101 },
                _ => JobAction::Cancel { job_id: 999_999 },
            };
            let now = s.now();
            let result = s.request("alice", action).await;
            sent += 1;
            let state = s.gateway().limiter().state("alice").ok_or("no throttle state")?;
            let violated = matches!(result, Ok(Served::Cached(_)) | Err(GatewayError::Throttled { .. }));
            if violated {
                violations += 1;
                let k = state.consecutive_violations;
                let until = state.blocked_until.ok_or("violation without block")?;
                ensure!(until - now == backoff_oracle(k), "violation {k}: blocked {:?}", until - now);
                if let Err(GatewayError::Throttled { retry_after }) = result {
                    ensure!(retry_after == backoff_oracle(k), "retry_after {retry_after:?} for violation {k}");
                }
            }
        }
    }
    ensure!(violations > 500, "only {violations} of {sent} requests were over budget");
    let times: Vec<_> = s.sim.lock().log_since(seq).iter().filter(|e| e.user == "alice").map(|e| e.at).collect();
    ensure!(!times.is_empty(), "no commands reached the cluster");
    for (i, t) in times.iter().enumerate() {
        let in_window = times[i..].iter().take_while(|u| **u < *t + TimeDelta::seconds(10)).count();
        ensure!(in_window <= 10, "{in_window} commands in the 10 s window starting {t}");
    }

    let limiter = RateLimiter::new(LimiterConfig::default());
    let t0 = s.now();
    for i in 0..10 {
        ensure!(limiter.check("p", 1, t0 + TimeDelta::milliseconds(i)) == Verdict::Admit, "admit {i}");
    }
    for k in 1..=12u32 {
        let at = t0 + TimeDelta::milliseconds(10 + i64::from(k));
        match limiter.check("p", 1, at) {
            Verdict::Violation {
                blocked_until,
                violations,
                ..
            } => {
                ensure!(violations == k, "violation count {violations} != {k}");
                ensure!(blocked_until - at == backoff_oracle(k), "k={k}: offset {:?}", blocked_until - at);
            }
            Verdict::Admit => return Err(format!("request {k} over threshold admitted")),
        }
    }
    Ok(())
}

// 4. Over-threshold status requests get the bytes of the last successful
//    dispatch; lookups past the ttl miss.
async fn criterion_4() -> Outcome {
    let dir = tempdir();
    let s = sim_stack(&dir, SimConfig::default(), PollConfig::default(), &["alice", "bob"])?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let action = JobAction::Status {
        user: Some("alice".into()),
    };
    let key = CacheKey::for_action("alice", &action);
    let ttl = TimeDelta::seconds(60);
    let mut last: Option<(Vec<u8>, chrono::DateTime<chrono::Utc>)> = None;
    let mut cached = 0;
    for i in 0..300 {
        if i % 7 == 0 {
            qsub(&mut s.sim.lock(), "alice", &format!("c{i}"), &mut rng)?;
        }
        // Idle spells let the budget recover so fresh dispatches keep coming.
        s.advance(if i % 40 == 39 { 75 } else { rng.random_range(0..=1) });
        let now = s.now();
        match s.request("alice", action.clone()).await {
            Ok(Served::Fresh(resp)) => {
                last = Some((serde_json::to_vec(&*resp).map_err(|e| e.to_string())?, now));
            }
            Ok(Served::Cached(entry)) => {
                let (bytes, stored_at) = last.as_ref().ok_or("cache hit before any dispatch")?;
                ensure!(entry.stored_at == *stored_at, "served an older entry");
                ensure!(serde_json::to_vec(&*entry.value).unwrap() == *bytes, "cached payload differs");
                ensure!(now - *stored_at <= ttl, "served past ttl");
                cached += 1;
            }
            Err(GatewayError::Throttled { .. }) => {
                if let Some((_, stored_at)) = &last {
                    ensure!(now - *stored_at > ttl, "rejected while a fresh entry existed");
                }
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    ensure!(cached > 0, "no request was served from cache");
    let (_, stored_at) = last.ok_or("no dispatch")?;
    ensure!(s.gateway().cache_lookup(&key, stored_at + ttl).is_some(), "miss at exactly ttl");
    ensure!(
        s.gateway().cache_lookup(&key, stored_at + ttl + TimeDelta::milliseconds(1)).is_none(),
        "hit after ttl"
    );
    let other = CacheKey::for_action("bob", &action);
    ensure!(s.gateway().cache_lookup(&other, stored_at).is_none(), "entry shared across principals");
    Ok(())
}

// 5. Parsing what the simulator prints gives back the simulator's own state.
async fn criterion_5() -> Outcome {
    let adapter = SgeAdapter::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut details = 0;
    for i in 0..1_000u64 {
        let mut sim = SimCluster::new(SimConfig {
            seed: i,
            ..SimConfig::default()
        });
        for k in 0..rng.random_range(0..=6) {
            let user = *["alice", "bob", "a.very-long_user"].choose(&mut rng).unwrap();
            let name = format!("{}_{i}_{k}", ["bwa", "star", "a_rather_long_job_name_x"].choose(&mut rng).unwrap());
            qsub(&mut sim, user, &name, &mut rng)?;
            sim.advance_clock(rng.random_range(0..=900));
        }
        let out = sim.handle_command("alice", &CommandLine::new(["qstat", "-u", "*"]));
        let parsed = adapter.parse_job_list(&out.stdout).map_err(|e| format!("state {i}: {e}"))?;
        let truth: Vec<_> = sim.live_jobs().map(|j| j.summary()).collect();
        let key = |v: &[jobwatch_core::adapter::JobSummary]| {
            v.iter().map(|s| (s.job_id, s.status, s.user.clone(), s.job_name.clone())).collect::<BTreeSet<_>>()
        };
        ensure!(key(&parsed) == key(&truth), "state {i}: listing round trip lost data");
        ensure!(parsed == truth, "state {i}: listing fields differ");
        let live: Vec<u64> = sim.live_jobs().map(|j| j.job_id).collect();
        for job_id in live {
            let out = sim.handle_command("alice", &CommandLine::new(["qstat".to_string(), "-j".into(), job_id.to_string()]));
            let job = sim.job(job_id).expect("live job");
            let parsed = adapter.parse_job_detail(&out.stdout).map_err(|e| format!("state {i}: {e}"))?;
            let want = job.detail(sim.now(), sim.config().walltime_secs);
            ensure!(parsed == want, "state {i} job {}: detail differs\n{parsed:?}\n{want:?}", job.job_id);
            details += 1;
        }
    }
    ensure!(details > 1_000, "only {details} detail round trips");
    Ok(())
}

// 6. Stored keys never appear in clear, wrong passphrases fail, revocation
//    holds across a restart.
async fn criterion_6() -> Outcome {
    let dir = tempdir();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let store = CredentialStore::open(dir.path(), MIN_ITERATIONS).map_err(|e| e.to_string())?;
    let mut keys = Vec::new();
    for i in 0..100 {
        let len = rng.random_range(64..=400);
        let plain: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let pass = format!("passphrase-{}", rng.random::<u64>());
        let id = store.store_key(&plain, &pass, &format!("user{i}"), "cluster", 22).map_err(|e| e.to_string())?;
        keys.push((id, plain, pass));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir.path()).map_err(|e| e.to_string())? {
        files.push(std::fs::read(entry.map_err(|e| e.to_string())?.path()).map_err(|e| e.to_string())?);
    }
    let b64 = base64::engine::general_purpose::STANDARD;
    for (id, plain, pass) in &keys {
        let needles = [plain.clone(), b64.encode(plain).into_bytes(), hex::encode(plain).into_bytes()];
        for file in &files {
            for needle in &needles {
                ensure!(!file.windows(needle.len()).any(|w| w == needle.as_slice()), "key {id} found in clear");
            }
        }
        ensure!(store.load_key(id, &format!("{pass}!")).is_err(), "wrong passphrase accepted for {id}");
        let loaded = store.load_key(id, pass).map_err(|e| e.to_string())?;
        ensure!(loaded.as_slice() == plain.as_slice(), "key {id} did not round trip");
    }

    let sim = std::sync::Arc::new(parking_lot::Mutex::new(SimCluster::new(SimConfig::default())));
    let transport = std::sync::Arc::new(SimTransport::new(sim.clone()));
    let manager = ConnectionManager::new(std::sync::Arc::new(store), transport.clone(), DEFAULT_TIMEOUT);
    let qstat = CommandLine::new(["qstat"]);
    let (revoked, kept) = keys.split_at(5);
    let now = sim.lock().now();
    for (id, _, pass) in keys.iter().take(10) {
        manager.unlock(id, pass).map_err(|e| e.to_string())?;
        ensure!(manager.execute(id, &qstat).await.is_ok(), "execute before revocation failed");
    }
    for (id, _, _) in revoked {
        let fp = manager.credential_info(id).map_err(|e| e.to_string())?.fingerprint;
        manager.revoke_key(&fp, now).map_err(|e| e.to_string())?;
        ensure!(
            matches!(manager.execute(id, &qstat).await, Err(ConnectionError::RevokedKey(_))),
            "revoked key {id} still executes"
        );
    }
    drop(manager);
    let reopened = CredentialStore::open(dir.path(), MIN_ITERATIONS).map_err(|e| e.to_string())?;
    let manager = ConnectionManager::new(std::sync::Arc::new(reopened), transport, DEFAULT_TIMEOUT);
    for (id, _, pass) in revoked {
        ensure!(manager.unlock(id, pass).is_err(), "revoked key {id} unlocked after restart");
        ensure!(manager.execute(id, &qstat).await.is_err(), "revoked key {id} executes after restart");
    }
    for (id, _, pass) in kept.iter().take(5) {
        manager.unlock(id, pass).map_err(|e| e.to_string())?;
        ensure!(manager.execute(id, &qstat).await.is_ok(), "unrevoked key {id} refused after restart");
    }
    Ok(())
}

// 7. Archive columns and CSV export follow the published attribute table.
async fn criterion_7() -> Outcome {
    const TABLE: [(&str, &str); 19] = [
        ("jobId", "INTEGER"),
        ("jobName", "TEXT"),
        ("user", "VARCHAR(30)"),
        ("status", "INTEGER"),
        ("path", "TEXT"),
        ("command", "TEXT"),
        ("sourceDirectory", "TEXT"),
        ("outpath", "TEXT"),
        ("memoryRequested", "TEXT"),
        ("parallel", "INTEGER"),
        ("cores", "INTEGER"),
        ("timeAdded", "VARCHAR(30)"),
        ("runTime", "TEXT"),
        ("timeRemaining", "TEXT"),
        ("currentMemory", "INTEGER"),
        ("maximumMemory", "INTEGER"),
        ("clusterNode", "TEXT"),
        ("finalRunTime", "TEXT"),
        ("finalStatus", "TEXT"),
    ];
    let dir = tempdir();
    let clock = ManualClock::shared(SimConfig::default().epoch);
    let store = JobStore::open_with_clock(dir.path().join("jobs.db"), clock).map_err(|e| e.to_string())?;
    let columns = store.schema_columns().map_err(|e| e.to_string())?;
    let want: Vec<(String, String)> = TABLE.iter().map(|(n, t)| (n.to_string(), t.to_string())).collect();
    ensure!(columns == want, "schema columns {columns:?}");
    store.upsert_job(&JobRecord::new(7, "x", "alice", JobStatus::Queued)).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    store.export_csv(&mut out).map_err(|e| e.to_string())?;
    let text = String::from_utf8(out).map_err(|e| e.to_string())?;
    let header = text.lines().next().unwrap_or("");
    let names: Vec<&str> = TABLE.iter().map(|(n, _)| *n).collect();
    ensure!(header == names.join(","), "csv header {header:?}");
    Ok(())
}

/// Least squares through the raw normal equations, solved by Cramer's rule.
fn normal_equations(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (sx, sy, sxx, sxy) = points.iter().fold((0.0, 0.0, 0.0, 0.0), |(a, b, c, d), (x, y)| {
        (a + x, b + y, c + x * x, d + x * y)
    });
    let det = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    (slope, intercept)
}

fn close(got: f64, want: f64) -> bool {
    (got - want).abs() <= 1e-9 * want.abs().max(1.0)
}

// 8. Fitted coefficients agree with the normal-equations oracle; a
//    constructed archive recovers elapsed = 3 * reads + 7.
async fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for d in 0..100 {
        let n = rng.random_range(3..=120);
        let (a, b) = (rng.random_range(-5.0..5.0), rng.random_range(-100.0..100.0));
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(0.0..1000.0);
                (x, a * x + b + rng.random_range(-50.0..50.0))
            })
            .collect();
        let fit = fit_line(&points).map_err(|e| e.to_string())?;
        let (slope, intercept) = normal_equations(&points);
        ensure!(close(fit.slope, slope), "dataset {d}: slope {} vs {slope}", fit.slope);
        ensure!(close(fit.intercept, intercept), "dataset {d}: intercept {} vs {intercept}", fit.intercept);
    }

    let clock = ManualClock::shared(SimConfig::default().epoch);
    let store = JobStore::in_memory(clock).map_err(|e| e.to_string())?;
    let mut id = 1;
    let mut archive = |name: String, secs: u64, mem: u64| -> Outcome {
        store.upsert_job(&JobRecord::new(id, name, "alice", JobStatus::Running)).map_err(|e| e.to_string())?;
        let acct = AccountingRecord {
            job_id: id,
            final_status: JobStatus::Completed,
            final_run_time_secs: secs,
            maximum_memory: mem,
            exit_code: 0,
        };
        store.finalize_job(id, &acct).map_err(|e| e.to_string())?;
        id += 1;
        Ok(())
    };
    for reads in [1_000u64, 2_500, 4_000, 12_100, 30_000, 55_500] {
        archive(format!("toolA_reads={}K", reads as f64 / 1000.0), 3 * reads + 7, reads * 4096)?;
    }
    for (reads, secs) in [(1u64, 50u64), (2, 71), (3, 130), (4, 140)] {
        archive(format!("toolB_reads={reads}M"), secs, 1 << 30)?;
    }
    archive("toolC_reads=5M".into(), 10, 10)?;
    let rules = parse_rules(
        r#"
[[rules]]
name = "aligner"
pattern = '^(?P<tool>tool[A-Z])_reads=(?P<reads>\S+)$'
captures = { tool = "tool", reads = "reads" }
numericKeys = ["reads"]
fields = ["jobName"]
"#,
    )
    .map_err(|e| e.to_string())?;
    let set = build_models(&store, &rules, &["tool".to_string()], "reads").map_err(|e| e.to_string())?;
    let a = set.find("tool=toolA", Metric::ElapsedSeconds).ok_or("no model for toolA")?;
    ensure!(close(a.slope, 3.0) && close(a.intercept, 7.0), "toolA: ({}, {})", a.slope, a.intercept);
    ensure!(a.n == 6 && a.rmse == 0.0, "toolA: n {} rmse {}", a.n, a.rmse);
    ensure!(set.models.len() == 4, "{} models", set.models.len());
    ensure!(set.skipped.len() == 2 && set.skipped.iter().all(|s| s.group == "tool=toolC"), "skips {:?}", set.skipped);
    Ok(())
}

// 9. An ad-hoc refresh for one user leaves everyone else's records alone.
async fn criterion_9() -> Outcome {
    let dir = tempdir();
    let s = sim_stack(&dir, SimConfig::default(), PollConfig::default(), &["alice", "bob"])?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut owners = BTreeMap::new();
    for i in 0..12 {
        let user = if i % 3 == 0 { "alice" } else { *["bob", "carol"].choose(&mut rng).unwrap() };
        owners.insert(qsub(&mut s.sim.lock(), user, &format!("s{i}"), &mut rng)?, user);
    }
    s.advance(200);
    s.tick().await;
    s.advance(400);
    let snapshot = |user: &str| -> Result<Vec<u8>, String> {
        let rows = s.store().list_jobs(&HistoryQuery::for_user(user)).map_err(|e| e.to_string())?;
        serde_json::to_vec(&rows).map_err(|e| e.to_string())
    };
    let before: Vec<Vec<u8>> = ["bob", "carol"].iter().map(|u| snapshot(u)).collect::<Result<_, _>>()?;
    let alice_before = snapshot("alice")?;
    let seq = s.sim.lock().next_seq();
    let report = s.poller().refresh_user("alice", s.now()).await;
    ensure!(report.errors.is_empty(), "refresh errors {:?}", report.errors);
    let after: Vec<Vec<u8>> = ["bob", "carol"].iter().map(|u| snapshot(u)).collect::<Result<_, _>>()?;
    ensure!(before == after, "other users' records changed");
    ensure!(snapshot("alice")? != alice_before, "alice's records were not refreshed");
    let sim = s.sim.lock();
    for e in sim.log_since(seq) {
        if let Some(id) = e.job_id() {
            ensure!(owners.get(&id) == Some(&"alice"), "command {} touched job {id} of {:?}", e.argv, owners.get(&id));
        }
        ensure!(e.kind() != Some(CommandKind::List), "refresh issued a full listing");
    }
    Ok(())
}

fn run(rt: &tokio::runtime::Runtime, n: u32, fut: impl Future<Output = Outcome>) -> bool {
    let started = Instant::now();
    let outcome = rt.block_on(fut);
    let ms = started.elapsed().as_millis();
    match outcome {
        Ok(()) => {
            println!("criterion {n}: PASS ({ms} ms)");
            true
        }
        Err(why) => {
            println!("criterion {n}: FAIL ({why})");
            false
        }
    }
}

fn main() {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("runtime");
    let results = [
        run(&rt, 1, criterion_1()),
        run(&rt, 2, criterion_2()),
        run(&rt, 3, criterion_3()),
        run(&rt, 4, criterion_4()),
        run(&rt, 5, criterion_5()),
        run(&rt, 6, criterion_6()),
        run(&rt, 7, criterion_7()),
        run(&rt, 8, criterion_8()),
        run(&rt, 9, criterion_9()),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
