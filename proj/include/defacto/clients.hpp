#pragma once

#include "defacto/dataset.hpp"
#include "defacto/geometry.hpp"

#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace defacto {

struct ImageRef {
    std::filesystem::path path;
    std::string id;  // fixture key component; defaults to the filename stem

    static ImageRef from_path(std::filesystem::path p) {
        std::string stem = p.stem().string();
        return ImageRef{std::move(p), std::move(stem)};
    }
};

struct Detection {
    BBox box;
    std::string phrase;
    double score = 0.0;
};

struct OcrItem {
    BBox box;
    std::string text;
    double confidence = 0.0;
};

enum class ClientErrorKind {
    transport,
    timeout,
    malformed_response,
    empty_descriptor_set,
    fixture_missing,
};

class ClientError : public std::runtime_error {
public:
    ClientError(ClientErrorKind kind, std::string message)
        : std::runtime_error(std::move(message)), kind(kind) {}

    ClientErrorKind kind;
};

enum class ServiceMode { stub, live };

struct ServiceConfig {
    ServiceMode mode = ServiceMode::stub;
    std::string descriptors_url;
    std::string detect_url;
    std::string propose_url;
    std::string ocr_url;
    std::filesystem::path fixture_dir;
    double timeout_s = 10.0;
    int retries = 2;
    double backoff_initial_s = 0.05;
    int max_inflight = 4;
    double ocr_min_confidence = 0.3;
    bool send_image_url = false;  // default payload is image_b64

    /// key=value file; DEFACTO_<SERVICE>_URL environment variables override
    /// the per-service URLs afterwards.
    static ServiceConfig load(const std::filesystem::path& path);
    void apply_env_overrides();

    /// Throws std::runtime_error when the mode's requirements are unmet
    /// (all four URLs for live, a fixture directory for stub).
    void validate() const;
};

/// Typed contracts for the four external capabilities: descriptor-extracting
/// MLLM, open-vocabulary detector, region proposal network, OCR.
class EvidenceServices {
public:
    virtual ~EvidenceServices() = default;

    virtual DescriptorSet extract_descriptors(const ImageRef& image, const std::string& question) = 0;
    virtual std::vector<Detection> detect(const ImageRef& image, const DescriptorSet& descriptors) = 0;
    virtual std::vector<BBox> propose_regions(const ImageRef& image) = 0;
    virtual std::vector<OcrItem> read_text(const ImageRef& image) = 0;
};

// Fixture file names, shared by the stub reader and the transcript recorder.
std::string descriptors_fixture_name(const ImageRef& image, const std::string& question);
std::string detect_fixture_name(const ImageRef& image, const DescriptorSet& descriptors);
std::string propose_fixture_name(const ImageRef& image);
std::string ocr_fixture_name(const ImageRef& image);

std::unique_ptr<EvidenceServices> make_stub_services(const ServiceConfig& cfg);
std::unique_ptr<EvidenceServices> make_http_services(const ServiceConfig& cfg);

/// Wraps another service and captures every response in the fixture format,
/// so a live transcript can be replayed hermetically.
std::unique_ptr<EvidenceServices> make_recording_services(std::unique_ptr<EvidenceServices> inner,
                                                          std::filesystem::path fixture_out_dir);

/// Dispatch on cfg.mode.
std::unique_ptr<EvidenceServices> make_services(const ServiceConfig& cfg);

}  // namespace defacto
