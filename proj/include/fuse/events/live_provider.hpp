#pragma once

#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "fuse/events/retrieval.hpp"

namespace fuse::events {

/// Live provider settings, read from a config file. Secrets never live in the file:
/// `auth_env` names the environment variable holding the bearer token.
struct LiveProviderConfig {
    std::string endpoint;  // scheme://host[:port]/path
    std::string auth_env = "FUSE_LLM_TOKEN";
    int timeout_ms = 30000;
    int max_retries = 3;
    int max_concurrency = 4;
    double rate_per_second = 2.0;

    static LiveProviderConfig from_json(const nlohmann::json& j) {
        static const char* kKeys[] = {"endpoint", "auth_env", "timeout_ms", "max_retries", "max_concurrency",
                                      "rate_per_second"};
        for (auto it = j.begin(); it != j.end(); ++it)
            if (std::find_if(std::begin(kKeys), std::end(kKeys), [&](const char* k) { return it.key() == k; }) ==
                std::end(kKeys))
                throw std::invalid_argument("live provider config: unknown key '" + it.key() + "'");
        LiveProviderConfig c;
        c.endpoint = j.at("endpoint").get<std::string>();
        c.auth_env = j.value("auth_env", c.auth_env);
        c.timeout_ms = j.value("timeout_ms", c.timeout_ms);
        c.max_retries = j.value("max_retries", c.max_retries);
        c.max_concurrency = j.value("max_concurrency", c.max_concurrency);
        c.rate_per_second = j.value("rate_per_second", c.rate_per_second);
        if (c.timeout_ms <= 0 || c.max_retries < 0 || c.max_concurrency < 1 || c.rate_per_second < 0)
            throw std::invalid_argument("live provider config: invalid limits");
        return c;
    }

    RetrievalOptions retrieval_options() const {
        RetrievalOptions o;
        o.max_retries = max_retries;
        o.max_concurrency = max_concurrency;
        o.rate_per_second = rate_per_second;
        return o;
    }
};

/// POSTs {"key", "prompt"} as JSON to the endpoint. A JSON reply carrying a string
/// "text" field is unwrapped; any other body is returned verbatim for parse_response.
class HttpProvider final : public Provider {
public:
    explicit HttpProvider(LiveProviderConfig cfg) : cfg_(std::move(cfg)) {
        const auto scheme_end = cfg_.endpoint.find("://");
        if (scheme_end == std::string::npos) throw std::invalid_argument("endpoint needs a scheme: " + cfg_.endpoint);
        const auto path_start = cfg_.endpoint.find('/', scheme_end + 3);
        base_ = cfg_.endpoint.substr(0, path_start);
        path_ = path_start == std::string::npos ? "/" : cfg_.endpoint.substr(path_start);
        if (const char* tok = std::getenv(cfg_.auth_env.c_str())) token_ = tok;
    }

    std::string fetch(const QueryKey& key, const std::string& prompt) override {
        httplib::Client cli(base_);
        const auto secs = cfg_.timeout_ms / 1000, usecs = (cfg_.timeout_ms % 1000) * 1000;
        cli.set_connection_timeout(secs, usecs);
        cli.set_read_timeout(secs, usecs);
        cli.set_write_timeout(secs, usecs);
        httplib::Headers headers;
        if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
        const nlohmann::json body{{"key", key.canonical()}, {"prompt", prompt}};
        auto res = cli.Post(path_, headers, body.dump(), "application/json");
        if (!res) throw ProviderError("HTTP transport error: " + httplib::to_string(res.error()));
        if (res->status < 200 || res->status >= 300) throw ProviderError("HTTP status " + std::to_string(res->status));
        const auto j = nlohmann::json::parse(res->body, nullptr, false);
        if (j.is_object()) {
            auto t = j.find("text");
            if (t != j.end() && t->is_string()) return t->get<std::string>();
        }
        return res->body;
    }

private:
    LiveProviderConfig cfg_;
    std::string base_;
    std::string path_;
    std::string token_;
};

}  // namespace fuse::events
