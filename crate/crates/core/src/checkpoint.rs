//! JSON checkpoint: a domain graph plus the network whose GBN entries it
//! indexes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain_graph::{DomainGraph, DomainId, GraphDoc};
use crate::error::Result;
use crate::network::{Network, NetworkDoc};
use crate::prediction::{ClassifierDoc, MetadataClassifier};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub source: DomainId,
    pub graph: GraphDoc,
    pub network: NetworkDoc,
    /// Domain classifier over the graph's parameterized nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierDoc>,
}

impl Checkpoint {
    pub fn new(source: DomainId, graph: &DomainGraph, net: &Network) -> Self {
        Self {
            source,
            graph: graph.into(),
            network: net.to_doc(),
            classifier: None,
        }
    }

    pub fn with_classifier(mut self, classifier: &MetadataClassifier) -> Self {
        self.classifier = Some(classifier.to_doc());
        self
    }

    pub fn classifier(&self) -> Result<Option<MetadataClassifier>> {
        self.classifier.clone().map(MetadataClassifier::from_doc).transpose()
    }

    pub fn restore(&self) -> Result<(DomainGraph, Network)> {
        Ok((self.graph.clone().try_into()?, Network::from_doc(self.network.clone())?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
