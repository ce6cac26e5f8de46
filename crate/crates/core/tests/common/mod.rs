#![allow(dead_code)]

pub mod gen;

use trk_core::demos::{self, Demo};
use trk_core::guest::Program;
use trk_core::host::{EventScript, Host, HostConfig};
use trk_core::monitor::{run_monitored, Entry, MonitorConfig, RunReport};
use trk_core::replay::ReplayHost;
use trk_core::store::{open_store, Location, StoreHandle};

pub fn memory_store() -> StoreHandle {
    StoreHandle::new(open_store(Location::InMemory).unwrap())
}

pub fn flappy_host() -> Host {
    Host::new(HostConfig {
        seed: demos::FLAPPY_SEED,
        script: Some(EventScript::parse(demos::FLAPPY_EVENTS).unwrap()),
    })
}

pub fn config(program: &Program) -> MonitorConfig {
    Host::monitor_config(program).unwrap()
}

pub fn record(demo: &Demo, host: &Host, entry: Entry, store: &StoreHandle) -> RunReport {
    let program = demo.program();
    let mut env = host.env();
    run_monitored(&program, &entry, &mut env, &config(&program), store, demo.name).unwrap()
}

pub fn record_flappy(store: &StoreHandle) -> RunReport {
    record(&demos::FLAPPY, &flappy_host(), Entry::TopLevel, store)
}

pub fn replay_host(env: &mut trk_core::guest::Env) -> ReplayHost<'_> {
    ReplayHost::new(env, std::rc::Rc::new(Host::hooks()), std::rc::Rc::new(Host::serializers()))
}
