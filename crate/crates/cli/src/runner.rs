use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

use controlvideo::longvideo::WindowRunner;
use controlvideo::{LatentVideo, Result};

/// Evaluates window jobs on a rayon pool. Results come back in job order,
/// so output does not depend on the thread count.
pub struct RayonRunner {
    pool: ThreadPool,
}

impl RayonRunner {
    pub fn new(threads: Option<usize>) -> std::result::Result<Self, rayon::ThreadPoolBuildError> {
        let mut b = ThreadPoolBuilder::new();
        if let Some(n) = threads {
            b = b.num_threads(n);
        }
        Ok(RayonRunner { pool: b.build()? })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl WindowRunner for RayonRunner {
    fn run(&self, count: usize, job: &(dyn Fn(usize) -> Result<LatentVideo> + Sync)) -> Vec<Result<LatentVideo>> {
        self.pool.install(|| (0..count).into_par_iter().map(job).collect())
    }
}
