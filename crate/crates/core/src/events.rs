//! Structured recovery events, one JSON object per line.
//!
//! Every event carries `event`, `page_id`, `lsn`, `duration_us` and
//! `io_counts`. `duration_us` is the only field that depends on timing;
//! [`EventLog::stream_without_timing`] drops it for determinism checks.

use std::io::Write;

use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IoCounts {
    pub backup_reads: u64,
    pub log_reads: u64,
    pub page_reads: u64,
    pub page_writes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub event: &'static str,
    pub page_id: Option<u64>,
    pub lsn: Option<u64>,
    pub duration_us: u64,
    pub io_counts: IoCounts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Event {
    pub fn new(event: &'static str) -> Self {
        Event {
            event,
            page_id: None,
            lsn: None,
            duration_us: 0,
            io_counts: IoCounts::default(),
            detail: None,
        }
    }

    pub fn page(mut self, page: u64) -> Self {
        self.page_id = Some(page);
        self
    }

    pub fn lsn(mut self, lsn: u64) -> Self {
        self.lsn = Some(lsn);
        self
    }

    pub fn took(mut self, us: u64) -> Self {
        self.duration_us = us;
        self
    }

    pub fn io(mut self, io: IoCounts) -> Self {
        self.io_counts = io;
        self
    }

    pub fn detail(mut self, d: impl Into<String>) -> Self {
        self.detail = Some(d.into());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }

    pub fn to_json_without_timing(&self) -> String {
        let mut v = serde_json::to_value(self).expect("event serializes");
        v.as_object_mut().unwrap().remove("duration_us");
        v.to_string()
    }
}

#[derive(Default)]
pub struct EventLog {
    events: Vec<Event>,
    sink: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog").field("events", &self.events.len()).finish()
    }
}

impl EventLog {
    pub fn set_sink(&mut self, sink: Option<Box<dyn Write + Send>>) {
        self.sink = sink;
    }

    pub fn emit(&mut self, e: Event) {
        if let Some(s) = &mut self.sink {
            let _ = writeln!(s, "{}", e.to_json());
        }
        self.events.push(e);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Removes and returns the events gathered so far.
    pub fn take(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn count(&self, kind: &str) -> usize {
        self.events.iter().filter(|e| e.event == kind).count()
    }

    pub fn stream_without_timing(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_json_without_timing());
            out.push('\n');
        }
        out
    }

    pub fn flush(&mut self) {
        if let Some(s) = &mut self.sink {
            let _ = s.flush();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_is_the_only_dropped_field() {
        let e = Event::new("single_page_recovery").page(7).lsn(99).took(1234);
        let full: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        let bare: serde_json::Value = serde_json::from_str(&e.to_json_without_timing()).unwrap();
        assert_eq!(full["duration_us"], 1234);
        assert!(bare.get("duration_us").is_none());
        assert_eq!(bare["page_id"], 7);
        assert_eq!(bare["io_counts"]["backup_reads"], 0);
    }
}
