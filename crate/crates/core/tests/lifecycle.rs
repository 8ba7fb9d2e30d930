use std::collections::BTreeSet;

use jobwatch_core::adapter::{CommandKind, JobStatus, SubmitSpec};
use jobwatch_core::gateway::{GatewayConfig, GatewayError, GatewayResponse, JobAction, Stage};
use jobwatch_core::poller::PollConfig;
use jobwatch_core::sim::SimConfig;
use jobwatch_core::stack::SimStack;
use jobwatch_core::store::HistoryQuery;
use jobwatch_core::CommandLine;

const ITERATIONS: u32 = jobwatch_core::connection::keystore::MIN_ITERATIONS;

fn stack(dir: &tempfile::TempDir, sim: SimConfig, poll: PollConfig) -> SimStack {
    SimStack::new(sim, GatewayConfig::default(), poll, dir.path(), ITERATIONS, &["alice", "bob"]).unwrap()
}

fn spec(name: &str) -> SubmitSpec {
    SubmitSpec {
        job_name: name.into(),
        script_path: format!("/home/alice/{name}.sh"),
        source_directory: "/home/alice/run".into(),
        memory_requested: "4G".into(),
        cores: 2,
        parallel: true,
        output_path: None,
        extra_args: vec![],
    }
}

#[tokio::test]
async fn submit_then_poll_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let s = stack(&dir, SimConfig { failure_rate: 0.0, ..SimConfig::default() }, PollConfig::default());
    let served = s.request("alice", JobAction::Submit(spec("align"))).await.unwrap();
    let GatewayResponse::Submitted { job_id, record } = &**served.response() else { panic!() };
    assert_eq!(*job_id, 101);
    assert_eq!(record.user, "alice");
    assert_eq!(record.status, JobStatus::Queued);
    assert_eq!(record.time_added, "2019-09-14T08:00:00Z");
    assert_eq!(record.outpath, "/home/alice/run/align.o101");
    assert_eq!(s.store().error_path(101).unwrap().as_deref(), Some("/home/alice/run/align.e101"));

    let ticks = s.run_to_quiescence(30, 200).await.expect("quiescent");
    assert!(ticks > 1);
    let r = s.store().get_job(101).unwrap();
    assert_eq!(r.final_status, "Completed");
    let truth = s.sim.lock().ledger().terminal_accounting();
    assert_eq!(truth.len(), 1);
    assert_eq!(r.maximum_memory, truth[0].maximum_memory);
}

#[tokio::test]
async fn cancel_flows_to_deleted() {
    let dir = tempfile::tempdir().unwrap();
    let s = stack(&dir, SimConfig::default(), PollConfig::default());
    s.request("alice", JobAction::Submit(spec("x"))).await.unwrap();
    s.tick().await;
    s.request("alice", JobAction::Cancel { job_id: 101 }).await.unwrap();
    assert_eq!(s.store().get_job(101).unwrap().status, JobStatus::Deleted);
    s.advance(30);
    let report = s.tick().await;
    assert_eq!(report.finalized_jobs, 1, "{report:?}");
    assert_eq!(s.store().get_job(101).unwrap().final_status, "Deleted");
}

#[tokio::test]
async fn cancel_of_unknown_job_is_a_transport_error() {
    let dir = tempfile::tempdir().unwrap();
    let s = stack(&dir, SimConfig::default(), PollConfig::default());
    let err = s.request("alice", JobAction::Cancel { job_id: 999 }).await.unwrap_err();
    let GatewayError::Dispatch(d) = err else { panic!("{err:?}") };
    assert_eq!(d.stage, Stage::Transport);
    assert_eq!(s.store().count().unwrap(), 0);
}

#[tokio::test]
async fn invalid_submit_sends_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let s = stack(&dir, SimConfig::default(), PollConfig::default());
    let bad = SubmitSpec { cores: 0, ..spec("bad") };
    let err = s.request("alice", JobAction::Submit(bad)).await.unwrap_err();
    assert!(matches!(err, GatewayError::Dispatch(ref d) if d.stage == Stage::Render), "{err:?}");
    assert!(s.sim.lock().command_log().is_empty());
}

#[tokio::test]
async fn round_robin_details_across_ticks() {
    let dir = tempfile::tempdir().unwrap();
    let poll = PollConfig { detail_batch_limit: 3, ..PollConfig::default() };
    let s = stack(&dir, SimConfig::default(), poll);
    for i in 0..5 {
        let cmd = CommandLine::new(["qsub", "-N", &format!("j{i}"), "run.sh"]);
        assert!(s.sim.lock().handle_command("bob", &cmd).is_success());
    }
    let details = |from: u64| -> Vec<u64> {
        let sim = s.sim.lock();
        sim.log_since(from)
            .iter()
            .filter(|e| e.kind() == Some(CommandKind::Detail))
            .filter_map(|e| e.job_id())
            .collect()
    };
    let seq = s.sim.lock().next_seq();
    let r1 = s.tick().await;
    assert_eq!(r1.detail_queries_issued, 3);
    assert_eq!(details(seq), vec![101, 102, 103]);
    let seq = s.sim.lock().next_seq();
    s.tick().await;
    assert_eq!(details(seq), vec![104, 105, 101]);
}

#[tokio::test]
async fn accounting_outage_closes_as_unknown_after_retry_bound() {
    let dir = tempfile::tempdir().unwrap();
    let sim = SimConfig { accounting_available: false, run_duration: (10, 10), queue_delay: (1, 1), ..SimConfig::default() };
    let s = stack(&dir, sim, PollConfig { retry_bound: 3, ..PollConfig::default() });
    s.request("bob", JobAction::Submit(spec("gone"))).await.unwrap();
    s.tick().await;
    s.advance(60);
    for _ in 0..2 {
        s.tick().await;
        assert!(!s.store().get_job(101).unwrap().is_final());
    }
    s.tick().await;
    assert_eq!(s.store().get_job(101).unwrap().final_status, "Unknown");
}

#[tokio::test]
async fn refresh_touches_only_that_user() {
    let dir = tempfile::tempdir().unwrap();
    let s = stack(&dir, SimConfig::default(), PollConfig::default());
    for user in ["alice", "bob", "alice"] {
        let cmd = CommandLine::new(["qsub", "run.sh"]);
        s.sim.lock().handle_command(user, &cmd);
    }
    s.tick().await;
    s.advance(300);
    let bob_before = s.store().list_jobs(&HistoryQuery::for_user("bob")).unwrap();
    let seq = s.sim.lock().next_seq();
    let report = s.poller().refresh_user("alice", s.now()).await;
    assert_eq!(report.listed_jobs, 2);
    assert_eq!(report.detail_queries_issued, 2);
    let bob_after = s.store().list_jobs(&HistoryQuery::for_user("bob")).unwrap();
    assert_eq!(bob_before, bob_after);
    let sim = s.sim.lock();
    let touched: BTreeSet<u64> = sim.log_since(seq).iter().filter_map(|e| e.job_id()).collect();
    assert_eq!(touched, BTreeSet::from([101, 103]));
}
