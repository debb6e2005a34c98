use std::sync::Arc;

use crate::algorithm::{DynamicAlgorithm, FnAlgorithm};
use crate::casestudy::control::ReactorController;

type Resolver = dyn Fn(&str) -> Option<Arc<dyn DynamicAlgorithm>> + Send + Sync;

/// Algorithms a cloud can instantiate by name.
///
/// Both ends load the algorithm definition out of band; the Hello message
/// carries only the name.
#[derive(Clone, Default)]
pub struct Registry {
    resolvers: Vec<Arc<Resolver>>,
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// `echo[:n]`, `zero[:n]` and `reactor-controller[:verbatim|:<h>]`.
    pub fn builtin() -> Self {
        Self::empty().with_resolver(builtin)
    }

    pub fn with_resolver<F>(mut self, f: F) -> Self
    where
        F: Fn(&str) -> Option<Arc<dyn DynamicAlgorithm>> + Send + Sync + 'static,
    {
        self.resolvers.push(Arc::new(f));
        self
    }

    pub fn with_algorithm(self, name: &str, alg: Arc<dyn DynamicAlgorithm>) -> Self {
        let name = name.to_string();
        self.with_resolver(move |n| (n == name).then(|| alg.clone()))
    }

    pub fn resolve(&self, name: &str) -> Option<Arc<dyn DynamicAlgorithm>> {
        self.resolvers.iter().find_map(|r| r(name))
    }
}

fn sized(name: &str, base: &str) -> Option<usize> {
    match name.strip_prefix(base)? {
        "" => Some(1),
        rest => rest.strip_prefix(':')?.parse().ok().filter(|&n| n > 0),
    }
}

fn builtin(name: &str) -> Option<Arc<dyn DynamicAlgorithm>> {
    if let Some(c) = ReactorController::from_registry_name(name) {
        return Some(Arc::new(c));
    }
    if let Some(n) = sized(name, "echo") {
        return Some(Arc::new(FnAlgorithm::echo(n)));
    }
    sized(name, "zero").map(|n| Arc::new(FnAlgorithm::zero(n, n, n)) as Arc<dyn DynamicAlgorithm>)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_names() {
        let r = Registry::builtin();
        assert_eq!(r.resolve("echo").unwrap().dims().ny, 1);
        assert_eq!(r.resolve("echo:4").unwrap().dims().nu, 4);
        assert_eq!(r.resolve("zero:2").unwrap().dims().nzeta, 2);
        assert_eq!(r.resolve("reactor-controller").unwrap().dims().nzeta, 3);
        for bad in ["echo:0", "echo:x", "echoes", "nope"] {
            assert!(r.resolve(bad).is_none(), "{bad}");
        }
    }

    #[test]
    fn custom_registry_resolves_only_its_names() {
        let r = Registry::empty().with_algorithm("mine", Arc::new(FnAlgorithm::echo(3)));
        assert_eq!(r.resolve("mine").unwrap().dims().ny, 3);
        assert!(r.resolve("echo").is_none());
    }
}
