use std::fs;

use edtrace::generate::{generate_to_files, WorkloadConfig};
use edtrace::pipeline::{cmd_analyze, cmd_run, AnalyzeOptions, RunConfig, FITS, PEAKS, SUMMARY};
use edtrace::verify::{verify_pipeline, Artifacts, Status};

fn small(seed: u64) -> WorkloadConfig {
    WorkloadConfig {
        seed,
        num_clients: 300,
        num_files: 800,
        total_messages: 8_000,
        ..WorkloadConfig::default()
    }
}

#[test]
fn generated_capture_survives_the_whole_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pcap = d.join("cap.pcap");
    let truth = generate_to_files(&small(31), &pcap).unwrap();
    let a = Artifacts {
        pcap: pcap.clone(),
        trace: d.join("cap.xml.gz"),
        reports: d.join("reports"),
    };
    let run = cmd_run(&RunConfig {
        input: pcap,
        trace_out: a.trace.clone(),
        reports: Some(a.reports.clone()),
        ..RunConfig::default()
    })
    .unwrap();
    assert_eq!(run.decoded, truth.expected.messages);
    assert!(run.ingest.balanced());

    let out = cmd_analyze(&a.trace, &a.reports, &AnalyzeOptions::default()).unwrap();
    assert_eq!(out.reports, truth.expected.distributions);
    for f in [SUMMARY, FITS, PEAKS] {
        assert!(a.reports.join(f).is_file(), "{f}");
    }

    let v = verify_pipeline(&a);
    assert!(v.passed(), "{v}");
}

#[test]
fn verification_notices_a_swapped_capture() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (one, two) = (d.join("one.pcap"), d.join("two.pcap"));
    generate_to_files(&small(41), &one).unwrap();
    generate_to_files(&small(42), &two).unwrap();
    let trace = d.join("t.xml");
    let reports = d.join("r");
    cmd_run(&RunConfig {
        input: two,
        trace_out: trace.clone(),
        reports: Some(reports.clone()),
        ..RunConfig::default()
    })
    .unwrap();
    let v = verify_pipeline(&Artifacts {
        pcap: one,
        trace,
        reports,
    });
    assert!(!v.passed());
    assert!(matches!(v.status("tables"), Some(Status::Fail(_))), "{v}");
    assert!(matches!(v.status("distributions"), Some(Status::Fail(_))), "{v}");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pcap = d.join("c.pcap");
    generate_to_files(&small(51), &pcap).unwrap();
    let mut outputs = Vec::new();
    for i in 0..2 {
        let trace = d.join(format!("t{i}.xml"));
        let reports = d.join(format!("r{i}"));
        cmd_run(&RunConfig {
            input: pcap.clone(),
            trace_out: trace.clone(),
            reports: Some(reports.clone()),
            ..RunConfig::default()
        })
        .unwrap();
        cmd_analyze(&trace, &reports, &AnalyzeOptions::default()).unwrap();
        let mut names: Vec<_> = fs::read_dir(&reports).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        let files: Vec<_> = names.iter().map(|n| (n.clone(), fs::read(reports.join(n)).unwrap())).collect();
        outputs.push((fs::read(&trace).unwrap(), files));
    }
    assert_eq!(outputs[0], outputs[1]);
}
