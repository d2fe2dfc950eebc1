mod common;

use std::sync::Arc;

use rulechat_core::decision::Decision;
use rulechat_service::transcript::parse_transcript;
use rulechat_service::{replay, Answer, ServiceError, Sessions, Status};

use common::{engine, fresh};

#[derive(Clone, Default)]
struct SharedBuf(Arc<std::sync::Mutex<Vec<u8>>>);

impl std::io::Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[test]
fn inquiry_then_answers_until_concluded() {
    let sessions = Sessions::new(engine());
    let ex = &fresh(2)[0];
    let mut s = sessions.create(&ex.snippet, &ex.question, &ex.scenario).unwrap();
    assert_eq!(s.last_move.decision, Decision::Inquire);
    assert_eq!(s.status, Status::AwaitingUser);
    let mut turns = 0;
    while s.status == Status::AwaitingUser && turns < 6 {
        let asked = s.explain.spans[s.last_move.rule_index.unwrap()].text.clone();
        let before = s.state.history.len();
        s = sessions.answer(&s.id, Answer::Yes).unwrap();
        turns += 1;
        assert_eq!(s.state.history.len(), before + 1);
        assert_eq!(s.state.history.last().unwrap().answer, "Yes");
        let same = s.explain.spans.iter().find(|r| r.text == asked).unwrap();
        assert_eq!(same.h, 1.0);
    }
    assert_eq!(s.status == Status::Concluded, s.last_move.decision != Decision::Inquire);
}

#[test]
fn scenario_covering_every_rule_concludes() {
    let sessions = Sessions::new(engine());
    for ex in fresh(0) {
        let s = sessions.create(&ex.snippet, &ex.question, &ex.scenario).unwrap();
        assert_eq!(s.status, Status::Concluded, "{}", ex.snippet);
        assert_eq!(s.last_move.decision, Decision::Yes);
        let err = sessions.answer(&s.id, Answer::No).unwrap_err();
        assert!(matches!(err, ServiceError::Concluded(_)));
    }
}

#[test]
fn explain_payload_is_consistent() {
    let sessions = Sessions::new(engine());
    for ex in fresh(2).iter().chain(&fresh(3)) {
        let s = sessions.create(&ex.snippet, &ex.question, &ex.scenario).unwrap();
        let e = sessions.explain(&s.id).unwrap();
        assert_eq!(e, s.explain);
        assert!(!e.spans.is_empty());
        for r in &e.spans {
            assert_eq!(ex.snippet[r.char_start..r.char_end].to_lowercase(), r.text);
            assert!((0.0..=1.0).contains(&r.g) && (0.0..=1.0).contains(&r.h));
            assert!(r.r.is_finite());
        }
    }
}

#[test]
fn identical_inputs_give_identical_moves() {
    let sessions = Sessions::new(engine());
    let ex = &fresh(2)[1];
    let a = sessions.create(&ex.snippet, &ex.question, &ex.scenario).unwrap();
    let b = sessions.create(&ex.snippet, &ex.question, &ex.scenario).unwrap();
    assert_ne!(a.id, b.id);
    assert_eq!((a.last_move, a.explain), (b.last_move, b.explain));
}

#[test]
fn errors() {
    let sessions = Sessions::new(engine());
    assert!(matches!(sessions.create("  ", "q", ""), Err(ServiceError::BadRequest(_))));
    assert!(matches!(sessions.get("missing"), Err(ServiceError::NotFound(_))));
    assert!(matches!(sessions.answer("missing", Answer::Yes), Err(ServiceError::NotFound(_))));
    assert!("maybe".parse::<Answer>().is_err());
    assert_eq!(" YES ".parse::<Answer>().unwrap(), Answer::Yes);
}

#[test]
fn replaying_a_transcript_reproduces_it() {
    let buf = SharedBuf::default();
    let sessions = Sessions::new(engine()).with_log(Box::new(buf.clone()));
    for (k, ex) in fresh(2).iter().chain(&fresh(0)).enumerate() {
        let mut s = sessions.create(&ex.snippet, &ex.question, &ex.scenario).unwrap();
        let mut n = 0;
        while s.status == Status::AwaitingUser && n < 4 {
            let a = if (k + n) % 3 == 2 { Answer::No } else { Answer::Yes };
            s = sessions.answer(&s.id, a).unwrap();
            n += 1;
        }
    }
    let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
    let records = parse_transcript(&text).unwrap();
    assert!(records.len() > fresh(2).len() + fresh(0).len());
    let report = replay(engine(), &records).unwrap();
    assert_eq!(report.records, records.len());
    assert!(report.reproduced(), "{report:?}");
}

#[test]
fn concurrent_sessions_are_independent() {
    let sessions = Arc::new(Sessions::new(engine()));
    let examples = fresh(2);
    let expected: Vec<_> = examples
        .iter()
        .map(|ex| engine().turn(&ex.dialogue_state()).unwrap().0)
        .collect();
    let handles: Vec<_> = examples
        .iter()
        .cloned()
        .map(|ex| {
            let s = sessions.clone();
            std::thread::spawn(move || {
                let created = s.create(&ex.snippet, &ex.question, &ex.scenario).unwrap();
                let answered = s.answer(&created.id, Answer::Yes).ok();
                (created.last_move, answered.map(|a| a.state.history.len()))
            })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(expected) {
        let (got, hist) = h.join().unwrap();
        assert_eq!(got, want);
        assert_eq!(hist, Some(1));
    }
    assert_eq!(sessions.len(), examples.len());
}
