use proptest::prelude::*;

use jobwatch_core::adapter::{CommandRequest, JobStatus, SchedulerAdapter, SgeAdapter, SubmitSpec};

fn hostile() -> impl Strategy<Value = String> {
    proptest::string::string_regex(r#"[a-z0-9 ;|&$`'"\\*?<>(){}\t-]{1,24}"#).unwrap()
}

proptest! {
    #[test]
    fn user_text_never_adds_argv_words(user in hostile(), dir in hostile(), extra in hostile()) {
        let adapter = SgeAdapter::new();
        if let Ok(cmd) = adapter.render_command(&CommandRequest::ListForUser { user: user.clone() }) {
            prop_assert_eq!(cmd.tokens().len(), 3);
            prop_assert_eq!(&cmd.tokens()[2], &user);
            let round = shlex::split(&cmd.to_shell_string()).unwrap();
            prop_assert_eq!(round, cmd.tokens().to_vec());
        }
        let spec = SubmitSpec {
            job_name: "job".into(),
            script_path: format!("/scripts/{dir}.sh"),
            source_directory: format!("/work/{dir}"),
            memory_requested: "1G".into(),
            cores: 1,
            parallel: false,
            output_path: None,
            extra_args: vec![extra],
        };
        let cmd = adapter.render_command(&CommandRequest::Submit(spec)).unwrap();
        // qsub -N job -wd DIR -l h_vmem=1G EXTRA SCRIPT
        prop_assert_eq!(cmd.tokens().len(), 9);
        let round = shlex::split(&cmd.to_shell_string()).unwrap();
        prop_assert_eq!(round, cmd.tokens().to_vec());
    }

    #[test]
    fn status_mapping_is_total(raw in ".{0,12}") {
        let adapter = SgeAdapter::new();
        let s = adapter.map_status(&raw);
        prop_assert_eq!(adapter.map_status(s.name()), s);
    }
}

#[test]
fn unknown_state_strings_map_to_unknown() {
    let adapter = SgeAdapter::new();
    for raw in ["", "zz", "qwz", "Rq"] {
        assert_eq!(adapter.map_status(raw), JobStatus::Unknown, "{raw:?}");
    }
}
