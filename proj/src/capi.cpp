#include "calseg/calseg.h"

#include <cstring>
#include <string>

#include "calseg/config.hpp"
#include "calseg/pipeline.hpp"

struct calseg_run {
    calseg::RunConfig config;
    std::string last_error;
};

namespace {

calseg_status map_code(calseg::Error::Code code) {
    using Code = calseg::Error::Code;
    switch (code) {
        case Code::invalid_argument: return CALSEG_INVALID_ARGUMENT;
        case Code::io: return CALSEG_IO_ERROR;
        case Code::state: return CALSEG_STATE_ERROR;
        case Code::numeric: return CALSEG_NUMERIC_ERROR;
        case Code::internal: return CALSEG_INTERNAL_ERROR;
    }
    return CALSEG_INTERNAL_ERROR;
}

template <class Fn>
calseg_status guarded(calseg_run* run, Fn&& fn) {
    if (!run) return CALSEG_INVALID_ARGUMENT;
    run->last_error.clear();
    try {
        fn();
        return CALSEG_OK;
    } catch (const calseg::Error& e) {
        run->last_error = e.what();
        return map_code(e.code());
    } catch (const std::exception& e) {
        run->last_error = e.what();
        return CALSEG_INTERNAL_ERROR;
    } catch (...) {
        run->last_error = "unknown error";
        return CALSEG_INTERNAL_ERROR;
    }
}

}  // namespace

extern "C" {

const char* calseg_version(void) { return "0.1.0"; }

calseg_status calseg_run_create(calseg_run** out_run) {
    if (!out_run) return CALSEG_INVALID_ARGUMENT;
    try {
        *out_run = new calseg_run();
        return CALSEG_OK;
    } catch (...) {
        *out_run = nullptr;
        return CALSEG_INTERNAL_ERROR;
    }
}

void calseg_run_destroy(calseg_run* run) { delete run; }

const char* calseg_run_last_error(const calseg_run* run) {
    return run ? run->last_error.c_str() : "null run handle";
}

calseg_status calseg_run_load_config(calseg_run* run, const char* path) {
    return guarded(run, [&] {
        if (!path) calseg::fail_invalid("config path is null");
        calseg::apply_config_file(run->config, path);
    });
}

calseg_status calseg_run_set(calseg_run* run, const char* key, const char* value) {
    return guarded(run, [&] {
        if (!key || !value) calseg::fail_invalid("config key/value is null");
        calseg::apply_config_entry(run->config, key, value);
    });
}

calseg_status calseg_run_config_text(calseg_run* run, char* buffer, size_t buffer_size,
                                     size_t* needed) {
    return guarded(run, [&] {
        const std::string text = calseg::serialize_config(run->config);
        if (needed) *needed = text.size() + 1;
        if (buffer && buffer_size > 0) {
            const size_t n = std::min(buffer_size - 1, text.size());
            std::memcpy(buffer, text.data(), n);
            buffer[n] = '\0';
        }
    });
}

const char* calseg_config_schema(void) {
    static const std::string schema = calseg::config_schema_text();
    return schema.c_str();
}

calseg_status calseg_run_generate(calseg_run* run, int overwrite) {
    return guarded(run, [&] { calseg::cmd_generate(run->config, overwrite != 0); });
}

calseg_status calseg_run_train_source(calseg_run* run) {
    return guarded(run, [&] { calseg::cmd_train_source(run->config); });
}

calseg_status calseg_run_select_source(calseg_run* run) {
    return guarded(run, [&] { calseg::cmd_select_source(run->config); });
}

calseg_status calseg_run_train_valuenet(calseg_run* run) {
    return guarded(run, [&] { calseg::cmd_train_valuenet(run->config); });
}

calseg_status calseg_run_adapt(calseg_run* run) {
    return guarded(run, [&] { calseg::cmd_adapt(run->config); });
}

calseg_status calseg_run_evaluate(calseg_run* run, const char* checkpoint_path,
                                  const char* split, const char* name) {
    return guarded(run, [&] {
        if (!checkpoint_path || !split || !name) {
            calseg::fail_invalid("evaluate: checkpoint, split and name are required");
        }
        (void)calseg::cmd_evaluate(run->config, checkpoint_path, split, name);
    });
}

calseg_status calseg_run_report(calseg_run* run, const char* runs_root) {
    return guarded(run, [&] {
        if (!runs_root) calseg::fail_invalid("report: runs_root is required");
        calseg::cmd_report(runs_root);
    });
}

}  // extern "C"
