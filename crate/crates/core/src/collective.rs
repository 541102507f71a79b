use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Reusable rendezvous point for the members of one team. The last member to
/// arrive runs the leader action; everyone receives its result.
pub(crate) struct Rendezvous {
    state: Mutex<State>,
    cv: Condvar,
}

#[derive(Default)]
struct State {
    generation: u64,
    arrived: BTreeSet<u32>,
    // generation -> (result, members still to collect it)
    results: HashMap<u64, (std::result::Result<u64, String>, usize)>,
}

impl Rendezvous {
    fn new() -> Rendezvous {
        Rendezvous {
            state: Mutex::new(State::default()),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn arrive(
        &self,
        rank: u32,
        expected: usize,
        timeout: Duration,
        what: &str,
        action: impl FnOnce() -> Result<u64>,
    ) -> Result<u64> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let gen = st.generation;
        st.arrived.insert(rank);
        if st.arrived.len() >= expected {
            let r = action().map_err(|e| e.to_string());
            st.results.insert(gen, (r, expected));
            st.generation += 1;
            st.arrived.clear();
            self.cv.notify_all();
        } else {
            let deadline = Instant::now() + timeout;
            while st.generation == gen {
                let now = Instant::now();
                if now >= deadline {
                    st.arrived.remove(&rank);
                    let missing = expected - st.arrived.len() - 1;
                    return Err(Error::Timeout(format!(
                        "{what}: unit {rank} waited {timeout:?}, {missing} member(s) never arrived"
                    )));
                }
                st = self
                    .cv
                    .wait_timeout(st, deadline - now)
                    .unwrap_or_else(|e| e.into_inner())
                    .0;
            }
        }
        let slot = st.results.get_mut(&gen).expect("result of finished generation");
        slot.1 -= 1;
        let r = slot.0.clone();
        if slot.1 == 0 {
            st.results.remove(&gen);
        }
        r.map_err(Error::Usage)
    }
}

/// One rendezvous per team index.
#[derive(Default)]
pub(crate) struct Collectives {
    points: Mutex<HashMap<u32, Arc<Rendezvous>>>,
}

impl Collectives {
    pub(crate) fn point(&self, team_index: u32) -> Arc<Rendezvous> {
        self.points
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry(team_index)
            .or_insert_with(|| Arc::new(Rendezvous::new()))
            .clone()
    }
}
